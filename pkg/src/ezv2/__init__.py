"""Model-based RL core: Gumbel tree search, search-based value targets and
unrolled model learning on toy environments."""

__version__ = "0.1.0"
