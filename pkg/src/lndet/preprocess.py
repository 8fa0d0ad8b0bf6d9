"""Per-volume intensity standardization: percentile clamp + rescale, then
histogram equalization over the whole volume."""
import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, RangeError
from .volcore import Study, Volume

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PreprocessConfig:
    p_low: float = 1.0
    p_high: float = 99.0
    hist_eq_bins: int = 256
    enable_hist_eq: bool = True
    # N4 bias correction is not implemented; requesting it only logs a notice.
    n4_bias_correction: bool = False

    def __post_init__(self):
        if not 0 <= self.p_low < self.p_high <= 100:
            raise ConfigError(f"need 0 <= p_low < p_high <= 100, got {self.p_low}, {self.p_high}")
        if int(self.hist_eq_bins) != self.hist_eq_bins or self.hist_eq_bins < 2:
            raise ConfigError(f"hist_eq_bins must be an integer >= 2, got {self.hist_eq_bins}")


def percentile_normalize(v: Volume, cfg: PreprocessConfig) -> Volume:
    data = v.data.astype(np.float64)
    lo, hi = np.percentile(data, [cfg.p_low, cfg.p_high], method="linear")
    if not hi > lo:
        return v.with_data(np.zeros(v.dims, dtype=np.float32))
    out = (np.clip(data, lo, hi) - lo) / (hi - lo)
    return v.with_data(np.clip(out, 0.0, 1.0).astype(np.float32))


def histogram_equalize(v: Volume, cfg: PreprocessConfig) -> Volume:
    """Map each voxel to the empirical CDF of its bin.

    Expects intensities in [0, 1]; anything outside raises ``RangeError``.
    """
    data = v.data
    if data.size and (data.min() < 0.0 or data.max() > 1.0):
        raise RangeError(f"histogram_equalize needs values in [0, 1], got [{data.min()}, {data.max()}]",
                         field="voxels")
    nb = int(cfg.hist_eq_bins)
    idx = np.minimum((data.astype(np.float64) * nb).astype(np.int64), nb - 1)
    counts = np.bincount(idx.ravel(), minlength=nb)
    cdf = np.cumsum(counts) / data.size
    return v.with_data(cdf[idx].astype(np.float32))


def preprocess_volume(v: Volume, cfg: PreprocessConfig) -> Volume:
    out = percentile_normalize(v, cfg)
    if cfg.enable_hist_eq:
        out = histogram_equalize(out, cfg)
    return out


def preprocess_study(s: Study, cfg: PreprocessConfig) -> Study:
    if cfg.n4_bias_correction:
        log.warning("N4 bias correction requested but not available; skipping it for study %s", s.study_id)
    return s.replace(series=tuple(preprocess_volume(v, cfg) for v in s.series))
