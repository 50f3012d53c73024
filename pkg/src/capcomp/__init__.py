"""Visual-token pruning with question-guided caption compensation, built on a small numpy autodiff core."""

from . import captioner, flops, lvlm, nn, numerics, preference, pruner, selector, vocab

__version__ = "0.1.0"

__all__ = ["captioner", "flops", "lvlm", "nn", "numerics", "preference", "pruner", "selector",
           "vocab"]
