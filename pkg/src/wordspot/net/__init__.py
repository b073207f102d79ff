"""Numpy region PHOC network: layers, model, training and gradient checking."""
