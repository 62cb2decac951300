"""Physics-guided neural network feedforward control: identification, FHOFC synthesis and error budgets."""

__version__ = "0.1.0"
