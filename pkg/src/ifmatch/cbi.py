"""Confidence-based identification of naive samples.

A naive sample is one the model still classifies correctly, with high
confidence, under the strongly augmented view; such samples contribute a
near-zero loss and benefit from extra feature-level perturbation.  The
ledger records, per unlabeled sample, the confidence assigned to its
pseudo-class in the strong branch (``h``) and a binary mask ``M = 1`` iff
``h`` cleared the branch threshold; branch two adds weak feature
perturbation only where ``M = 1``.

The loss-based baseline (``saa_identify``) splits the recorded per-sample
loss histogram with Otsu's method: below-threshold samples count as
naive.  Samples never visited fall back to a deterministic low-discrepancy
placeholder spread over [0, 1] (mirroring the random initialization of
the original method), which is what produces the documented cold-start
naive ratio of one half before any loss has been recorded.
"""

from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

OTSU_BINS = 256


@dataclass
class LedgerEntry:
    h: float = 0.0
    mask: int = 0
    loss: Optional[float] = None


@dataclass
class ConfidenceLedger:
    entries: Dict[int, LedgerEntry] = field(default_factory=dict)

    def entry(self, sample_id: int) -> LedgerEntry:
        e = self.entries.get(sample_id)
        if e is None:
            e = LedgerEntry()
            self.entries[sample_id] = e
        return e

    def stored_mask(self, sample_id: int) -> int:
        e = self.entries.get(sample_id)
        return 0 if e is None else e.mask

    def dump_rows(self):
        """(id, h, M) rows sorted by id, for CSV export."""
        return [(sid, e.h, e.mask) for sid, e in sorted(self.entries.items())]


def record(ledger: ConfidenceLedger, sample_id: int, pred_branch2: np.ndarray, pseudo_class: int):
    """Store the strong-branch confidence of the pseudo-class."""
    c = pred_branch2.shape[0]
    if not 0 <= pseudo_class < c:
        raise ValueError(f"pseudo class {pseudo_class} out of range for C={c}")
    ledger.entry(sample_id).h = float(pred_branch2[pseudo_class])


def mask(ledger: ConfidenceLedger, sample_id: int, tau_now: float) -> int:
    """1 iff the recorded confidence clears the threshold (inclusive).

    Samples never seen default to 0: a cold model has few genuinely naive
    samples and 0 selects the conservative, image-only branch.  The
    stored mask is refreshed as a side effect.
    """
    if not 0.0 <= tau_now <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {tau_now}")
    e = ledger.entries.get(sample_id)
    if e is None:
        return 0
    e.mask = 1 if e.h >= tau_now else 0
    return e.mask


def select_perturbations(mask_value: int):
    """Perturbation set for the strong student branch."""
    if mask_value == 1:
        return ("image_strong", "feature_weak")
    return ("image_strong",)


def van_der_corput(index: int) -> float:
    """Base-2 radical inverse of a positive integer; dense in (0, 1)."""
    v = 0.0
    denom = 1.0
    n = index
    while n:
        denom *= 2.0
        v += (n & 1) / denom
        n >>= 1
    return v


def default_loss(sample_id: int) -> float:
    """Deterministic placeholder loss for samples never visited."""
    return van_der_corput(sample_id + 1)


def recorded_losses(ledger: ConfidenceLedger, sample_ids) -> np.ndarray:
    """Loss per sample, substituting placeholders for never-seen ids."""
    out = np.empty(len(sample_ids))
    for i, sid in enumerate(sample_ids):
        e = ledger.entries.get(sid)
        if e is None or e.loss is None:
            out[i] = default_loss(sid)
        else:
            out[i] = e.loss
    return out


def otsu_threshold(values: np.ndarray, bins: int = OTSU_BINS) -> float:
    """Otsu split of a value histogram in exact integer arithmetic.

    Between-class variance is ranked over bin indices via cross-multiplied
    integer comparisons (cumulative sums, first maximum wins), so the
    selected split never depends on float summation order.  Returns the
    left edge of the first foreground bin; +inf for a degenerate
    histogram.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("empty value list")
    lo, hi = float(values.min()), float(values.max())
    if lo == hi:
        return float("inf")
    hist, edges = np.histogram(values, bins=bins, range=(lo, hi))
    cum = np.cumsum(hist)
    cum_weighted = np.cumsum(hist * np.arange(bins, dtype=np.int64))
    total = int(cum[-1])
    total_weighted = int(cum_weighted[-1])
    best_num = -1
    best_den = 1
    best_split = None
    for split in range(1, bins):
        s0 = int(cum[split - 1])
        s1 = total - s0
        if s0 == 0 or s1 == 0:
            continue
        w0sum = int(cum_weighted[split - 1])
        w1sum = total_weighted - w0sum
        num = (w0sum * s1 - w1sum * s0) ** 2
        den = s0 * s1
        if num * best_den > best_num * den:
            best_num, best_den = num, den
            best_split = split
    if best_split is None:
        return float("inf")
    return float(edges[best_split])


def saa_identify(loss_values) -> list:
    """Split losses into naive (below the Otsu threshold) and challenging.

    Ties and degenerate histograms resolve toward challenging.
    """
    values = np.asarray(loss_values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("empty loss list")
    if (values < 0).any():
        raise ValueError("losses must be non-negative")
    t = otsu_threshold(values)
    if not np.isfinite(t):
        return ["challenging"] * values.size
    return ["naive" if v < t else "challenging" for v in values]


def loss_to_confidence(loss: float) -> float:
    """Cross-entropy loss L on a one-hot target corresponds to target
    confidence exp(-L); printed by loss-based identification reports."""
    return float(np.exp(-loss))


def naive_ratio(teacher_pass: np.ndarray, masks: np.ndarray) -> float:
    """Fraction of the batch that passes the teacher gate with M = 1."""
    teacher_pass = np.asarray(teacher_pass, dtype=bool)
    masks = np.asarray(masks)
    if teacher_pass.size == 0:
        raise ValueError("empty batch")
    if teacher_pass.shape != masks.shape:
        raise ValueError("teacher_pass and masks must have matching length")
    return float(np.mean(teacher_pass & (masks == 1)))
