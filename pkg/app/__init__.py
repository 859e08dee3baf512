# PosteriorFlow application package
