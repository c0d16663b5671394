"""Time-sliced bipartite-graph recommender with dual dynamic user/item
states and a temporal point process auxiliary objective."""

__version__ = "0.1.0"
