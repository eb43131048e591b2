"""Equal error rate, normalised minimum t-DCF and per-attack accuracy.

Scores are "higher means more bonafide-like".  A trial is accepted as
bonafide when ``score >= threshold``.  Both metrics sweep the same candidate
thresholds: ``-inf``, the midpoints between consecutive distinct scores, and
``+inf``.  Between two candidates the operating point does not change, so
this sweep visits every achievable (FAR, FRR) pair.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, fields

import numpy as np

LABELS = ("bonafide", "spoof")


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class ScoreRecord:
    trial_id: str
    label: str
    score: float

    def __post_init__(self):
        if self.label not in LABELS:
            raise MetricError(f"{self.trial_id}: label must be bonafide or spoof, got {self.label!r}")
        if not math.isfinite(self.score):
            raise MetricError(f"{self.trial_id}: non-finite score")


def _split(records):
    bona = np.array([r.score for r in records if r.label == "bonafide"], dtype=np.float64)
    spoof = np.array([r.score for r in records if r.label == "spoof"], dtype=np.float64)
    if bona.size == 0 or spoof.size == 0:
        raise MetricError("need at least one bonafide and one spoof trial")
    return bona, spoof


def error_curves(bona: np.ndarray, spoof: np.ndarray):
    """Candidate thresholds with FAR (spoof >= t) and FRR (bonafide < t) at each."""
    uniq = np.unique(np.concatenate([bona, spoof]))
    thresholds = np.concatenate([[-np.inf], (uniq[:-1] + uniq[1:]) / 2, [np.inf]])
    bona_sorted = np.sort(bona)
    spoof_sorted = np.sort(spoof)
    # counts strictly below each threshold
    frr = np.searchsorted(bona_sorted, thresholds, side="left") / bona.size
    far = (spoof.size - np.searchsorted(spoof_sorted, thresholds, side="left")) / spoof.size
    return thresholds, far, frr


def eer_from_scores(bona, spoof):
    """EER and threshold for raw score arrays; see :func:`eer`."""
    thresholds, far, frr = error_curves(np.asarray(bona, float), np.asarray(spoof, float))
    d = far - frr  # non-increasing, +1 at -inf and -1 at +inf
    j = int(np.flatnonzero(d <= 0)[0])
    if d[j] == 0:
        return float(far[j]), float(thresholds[j])
    i = j - 1
    w = d[i] / (d[i] - d[j])
    rate = far[i] + w * (far[j] - far[i])
    # report the bracketing candidate nearer the crossing; prefer finite ones
    pick = j if abs(d[j]) < abs(d[i]) else i
    if abs(d[j]) == abs(d[i]) and not np.isfinite(thresholds[i]):
        pick = j
    return float(rate), float(thresholds[pick])


def eer(records) -> tuple:
    """Equal error rate and its operating threshold.

    FAR and FRR are step functions of the threshold; the EER is read off by
    linear interpolation between the two adjacent candidates where FAR - FRR
    changes sign (exactly when it hits zero at a candidate).
    """
    bona, spoof = _split(records)
    return eer_from_scores(bona, spoof)


@dataclass(frozen=True)
class TdcfParams:
    """Priors, costs and fixed ASV operating point of the tandem cost."""

    pi_target: float
    pi_nontarget: float
    pi_spoof: float
    c_miss_asv: float
    c_fa_asv: float
    c_miss_cm: float
    c_fa_cm: float
    p_miss_asv: float
    p_fa_asv: float
    p_fa_spoof_asv: float

    def validate(self) -> None:
        priors = (self.pi_target, self.pi_nontarget, self.pi_spoof)
        if min(priors) <= 0 or abs(sum(priors) - 1.0) > 1e-9:
            raise MetricError("priors must be positive and sum to 1")
        if min(self.c_miss_asv, self.c_fa_asv, self.c_miss_cm, self.c_fa_cm) <= 0:
            raise MetricError("costs must be positive")
        for name in ("p_miss_asv", "p_fa_asv", "p_fa_spoof_asv"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise MetricError(f"{name} must lie in [0, 1]")

    def constants(self) -> tuple:
        """(C1, C2) weighting the CM miss and false-alarm rates."""
        c1 = self.pi_target * (self.c_miss_cm - self.c_miss_asv * self.p_miss_asv) - (
            self.pi_nontarget * self.c_fa_asv * self.p_fa_asv
        )
        c2 = self.c_fa_cm * self.pi_spoof * self.p_fa_spoof_asv
        return c1, c2


def read_tdcf_params(path) -> TdcfParams:
    """Parse ``key = value`` lines ('#' comments) into :class:`TdcfParams`."""
    values = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise MetricError(f"{path}:{lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            values[key] = float(value)
    names = [f.name for f in fields(TdcfParams)]
    missing = [n for n in names if n not in values]
    unknown = [k for k in values if k not in names]
    if missing or unknown:
        raise MetricError(f"{path}: missing {missing}, unknown {unknown}")
    p = TdcfParams(**values)
    p.validate()
    return p


def min_tdcf_from_scores(bona, spoof, p: TdcfParams) -> float:
    p.validate()
    c1, c2 = p.constants()
    default = min(c1, c2)
    if default <= 0:
        raise MetricError(f"degenerate t-DCF normalisation: C1={c1}, C2={c2}")
    _, far, frr = error_curves(np.asarray(bona, float), np.asarray(spoof, float))
    cost = (c1 * frr + c2 * far) / default
    return float(cost.min())


def min_tdcf(records, p: TdcfParams) -> float:
    """Minimum over thresholds of ``(C1 * P_miss_cm + C2 * P_fa_cm) / min(C1, C2)``."""
    bona, spoof = _split(records)
    return min_tdcf_from_scores(bona, spoof, p)


def accuracy_at_eer(records, threshold: float, group_by_attack: dict) -> dict:
    """Per-attack fraction of spoof trials scored below ``threshold``.

    Returns ``{"bonafide": (n, acc), attack: (n, acc), ...}`` where bonafide
    accuracy is the fraction scored at or above the threshold.  Attacks in
    ``group_by_attack`` with no spoof trials among ``records`` are omitted
    with a warning.
    """
    unknown = [r.trial_id for r in records if r.trial_id not in group_by_attack]
    if unknown:
        raise MetricError(f"trials without an attack label: {unknown[:5]}")
    correct: dict = {}
    total: dict = {}
    bona_n = bona_ok = 0
    for r in records:
        if r.label == "bonafide":
            bona_n += 1
            bona_ok += r.score >= threshold
            continue
        a = group_by_attack[r.trial_id]
        total[a] = total.get(a, 0) + 1
        correct[a] = correct.get(a, 0) + (r.score < threshold)
    table = {}
    if bona_n:
        table["bonafide"] = (bona_n, bona_ok / bona_n)
    attacks = sorted({a for a in group_by_attack.values() if a != "-"})
    for a in attacks:
        if a not in total:
            warnings.warn(f"attack {a} has no spoof trials; omitted", stacklevel=2)
            continue
        table[a] = (total[a], correct[a] / total[a])
    return table


# --- score files -----------------------------------------------------------


def format_score(x: float) -> str:
    return repr(float(x))


def write_scores(path, records) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for r in records:
            f.write(f"{r.trial_id} {r.label} {format_score(r.score)}\n")


def read_scores(path) -> list:
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 3:
                raise MetricError(f"{path}:{lineno}: expected 'trial label score', got {len(parts)} fields")
            try:
                score = float(parts[2])
            except ValueError as e:
                raise MetricError(f"{path}:{lineno}: bad score {parts[2]!r}") from e
            try:
                out.append(ScoreRecord(parts[0], parts[1], score))
            except MetricError as e:
                raise MetricError(f"{path}:{lineno}: {e}") from e
    return out


def write_report(path, rows) -> None:
    """Write ``(section, key, value)`` rows as CSV."""
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["section", "key", "value"])
        for row in rows:
            w.writerow(row)
