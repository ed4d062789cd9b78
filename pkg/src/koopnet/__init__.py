"""Learning Koopman eigenfunctions with an autoencoder and a parametrized linear propagator."""

__version__ = "0.1.0"
