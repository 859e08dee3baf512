import os
import sys

# Add parent directory to path to import the app modules
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running calibration checks (deselect with -m 'not slow')")
