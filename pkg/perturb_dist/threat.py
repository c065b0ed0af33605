import numpy as np
from pydantic import BaseModel, ConfigDict, PositiveFloat, model_validator


class ThreatModel(BaseModel):
    """l-infinity ball of radius ``epsilon`` intersected with an optional pixel box."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    epsilon: PositiveFloat = 8 / 255
    pixel_box: tuple[float, float] | None = None

    @model_validator(mode="after")
    def check_box(self):
        if self.pixel_box is not None and not self.pixel_box[0] < self.pixel_box[1]:
            raise ValueError(f"pixel_box lower bound must be below upper bound: {self.pixel_box}")
        return self

    def project(self, x: np.ndarray, delta: np.ndarray) -> np.ndarray:
        """Clip ``delta`` to the ball, then move ``x + delta`` inside the pixel box."""
        delta = np.clip(delta, -self.epsilon, self.epsilon)
        if self.pixel_box is not None:
            lo, hi = self.pixel_box
            delta = np.clip(x + delta, lo, hi) - x
        return delta

    def contains(self, x: np.ndarray, delta: np.ndarray, atol: float = 1e-9) -> bool:
        if np.max(np.abs(delta), initial=0.0) > self.epsilon + atol:
            return False
        if self.pixel_box is not None:
            lo, hi = self.pixel_box
            adv = x + delta
            return bool(np.all(adv >= lo - atol) and np.all(adv <= hi + atol))
        return True
