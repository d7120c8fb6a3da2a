import math
from typing import *


class RelativeChange:
    """Filter for inner-loop losses

    Passes a loss through unless it changed by less than `tol` relative to the
    previous loss seen for the same key, in which case it returns None to signal
    convergence.
    """

    def __init__(self, tol: float = 1e-6):
        self.tol = tol
        self.old_data: dict = {}

    def __call__(self, loss: float, key: Hashable = None) -> Optional[float]:
        old_loss = self.old_data.get(key)
        self.old_data[key] = loss
        if old_loss is None or not math.isfinite(loss):
            return loss
        same = abs(loss - old_loss) <= self.tol * max(abs(old_loss), 1e-300)
        if not same:
            return loss
        else:
            return None

    def reset(self, key: Hashable = None):
        self.old_data.pop(key, None)


class BestCheckpoint:
    """Filter for validation scores

    Keeps the lowest finite score seen so far with its payload; returns the payload
    only when the score improves.
    """

    def __init__(self):
        self.best_score: float = math.inf
        self.best_step: Optional[int] = None
        self.best: Any = None

    def __call__(self, score: float, step: int, payload: Any) -> Optional[Any]:
        if math.isfinite(score) and score < self.best_score:
            self.best_score, self.best_step, self.best = score, step, payload
            return payload
        return None
