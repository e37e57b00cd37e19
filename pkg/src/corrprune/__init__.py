"""Two-view correspondence pruning with learned causal ordering and selective scans."""

__version__ = "0.1.0"

__all__ = ["CorrespondencePruner"]


def __getattr__(name):
    # deferred so that importing a submodule does not pull in scikit-learn
    if name == "CorrespondencePruner":
        from .estimator import CorrespondencePruner

        return CorrespondencePruner
    raise AttributeError(f"module 'corrprune' has no attribute {name!r}")
