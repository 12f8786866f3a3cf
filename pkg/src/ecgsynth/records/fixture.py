"""Deterministic synthetic ECG fixtures.

Waveforms are sums of Gaussian P/QRS/T bumps placed at class-dependent beat
intervals. Only the statistical class signatures are contractual (rate bands,
RR irregularity, flutter sawtooth, P-wave presence); the bump shapes below
are fixed cosmetic constants.
"""

from __future__ import annotations

import numpy as np

from ..errors import SchemaError
from .types import Dataset, EcgRecord, RhythmClass, Source

# per-beat morphology: (offset s, width s, amplitude mV)
_P_WAVE = (-0.16, 0.025, 0.15)
_Q_WAVE = (-0.035, 0.010, -0.10)
_R_WAVE = (0.0, 0.012, 1.10)
_S_WAVE = (0.035, 0.010, -0.18)
_T_WAVE = (0.22, 0.050, 0.30)

_NOISE_MV = 0.02
_FLUTTER_HZ = 5.0
_FLUTTER_MV = 0.15

# (mean heart rate bpm, relative RR jitter, has P wave, irregular, sawtooth)
_CLASS_PROFILE = {
    RhythmClass.SBRAD: (48.0, 0.04, True, False, False),
    RhythmClass.SR: (75.0, 0.04, True, False, False),
    RhythmClass.AFIB: (90.0, 0.25, False, True, False),
    RhythmClass.STACH: (115.0, 0.04, True, False, False),
    RhythmClass.AFLT: (85.0, 0.04, False, False, True),
    RhythmClass.SARRH: (70.0, 0.03, True, True, False),
    RhythmClass.SVTAC: (150.0, 0.03, False, False, False),
}


def _beat_times(cls: RhythmClass, seconds: float, rng: np.random.Generator) -> np.ndarray:
    hr, jitter, _, irregular, _ = _CLASS_PROFILE[cls]
    rr_base = 60.0 / hr
    offset = 0.15 + float(rng.uniform(0.1, 0.4)) * rr_base
    n_draw = max(int(np.ceil((seconds - offset) / rr_base * 1.6)) + 3, 3)
    noise = rng.standard_normal(n_draw)
    if cls == RhythmClass.SARRH:
        # respiratory RR modulation on top of small beat-to-beat jitter
        approx_t = offset + np.arange(n_draw) * rr_base
        devs = 0.25 * np.sin(2 * np.pi * 0.25 * approx_t) + jitter * noise
    else:
        devs = jitter * noise
    intervals = rr_base * (1.0 + devs)
    if irregular and intervals.size >= 2:
        # enforce the CV >= 0.15 signature deterministically: rescale RR
        # deviations around the mean, re-checking after the physiological
        # floor clip
        for _ in range(3):
            mean = intervals.mean()
            cv = intervals.std() / mean
            if cv >= 0.155:
                break
            intervals = mean + (intervals - mean) * (0.18 / max(cv, 1e-6))
            intervals = np.maximum(intervals, 0.25)
    intervals = np.maximum(intervals, 0.25)
    beats = offset + np.concatenate([[0.0], np.cumsum(intervals)])
    return beats[beats < seconds - 0.02]


def generate_fixture(cls: RhythmClass, fs: float, seconds: float, leads: int,
                     seed: int) -> EcgRecord:
    """Deterministic synthetic record for one rhythm class.

    Class signatures: SBRAD mean HR < 60 bpm; STACH/SVTAC > 100 bpm;
    AFIB/SARRH RR coefficient of variation >= 0.15; AFLT adds a sawtooth
    baseline; SR regular 60-100 bpm.
    """
    if fs not in (100, 500):
        raise SchemaError(f"fixture fs must be 100 or 500 Hz, got {fs}")
    if seconds <= 0:
        raise SchemaError(f"fixture duration must be positive, got {seconds}")
    if leads < 1:
        raise SchemaError(f"need at least one lead, got {leads}")
    rng = np.random.default_rng(
        [int(seed), int(cls), int(fs), int(round(seconds * 1000)), int(leads)])
    n = int(round(seconds * fs))
    t = np.arange(n) / fs
    _, _, has_p, _, sawtooth = _CLASS_PROFILE[cls]

    beats = _beat_times(cls, seconds, rng)
    base = np.zeros(n)
    waves = [_Q_WAVE, _R_WAVE, _S_WAVE, _T_WAVE] + ([_P_WAVE] if has_p else [])
    for beat in beats:
        for offset, width, amp in waves:
            center = beat + offset
            lo = max(int((center - 5 * width) * fs), 0)
            hi = min(int((center + 5 * width) * fs) + 1, n)
            if lo < hi:
                seg = t[lo:hi] - center
                base[lo:hi] += amp * np.exp(-0.5 * (seg / width) ** 2)
    if sawtooth:
        phase = (t * _FLUTTER_HZ) % 1.0
        base += _FLUTTER_MV * (2.0 * phase - 1.0)

    # per-lead projection: deterministic gains plus lead-specific noise
    gains = 1.0 - 0.35 * np.arange(leads) / max(leads - 1, 1)
    signal = gains[:, None] * base[None, :]
    signal += _NOISE_MV * rng.standard_normal((leads, n))
    record_id = f"fx-{cls.code}-{seed}"
    return EcgRecord(signal=signal, fs=fs, label=cls, record_id=record_id,
                     source=Source.FIXTURE)


def generate_fixture_dataset(classes, per_class: int, fs: float, seconds: float,
                             leads: int, seed: int) -> Dataset:
    """Per-class batch of fixtures with record ids unique across the set."""
    records = []
    for cls in classes:
        for i in range(per_class):
            rec = generate_fixture(cls, fs, seconds, leads, seed=seed * 100003 + i * 7 + int(cls))
            rec.record_id = f"fx-{cls.code}-{seed}-{i}"
            records.append(rec)
    return Dataset(records=records)
