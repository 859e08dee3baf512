# Dataset loading and synthetic data tools
