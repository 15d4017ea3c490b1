"""Environment-map lighting for augmented reality from RGB-D frames."""
