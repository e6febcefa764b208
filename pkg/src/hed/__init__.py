"""HED bundle recommender: complete hypergraph, dual convolution, UIB training."""

__version__ = "0.1.0"
