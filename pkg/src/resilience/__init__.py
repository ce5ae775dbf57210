"""Academic-resilience indicators, boosted-tree models and exact tree SHAP explanations."""

__version__ = "0.1.0"
