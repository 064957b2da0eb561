"""CSI preprocessing: ratio denoising, frame grouping, and feature-map assembly.

The chain mirrors a commodity-WiFi sensing front end: divide two antennas'
CSI streams to cancel shared hardware gain/phase noise, chop the stream into
per-video-frame groups, and render magnitude / unwrapped-phase / Doppler
panels into a fixed-size 3-channel image for the CNN encoder.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class CsiError(ValueError):
    """Base class for CSI preprocessing failures."""


class SameAntenna(CsiError):
    """Ratio numerator and denominator refer to the same antenna."""


class TooFewSamples(CsiError):
    """Stream too short to form even one sample per group."""


class WindowTooLarge(CsiError):
    """STFT window exceeds the group length."""


@dataclass(frozen=True)
class CsiTensor:
    """Complex CSI over (antenna_pairs, subcarriers, time) with rate metadata."""

    data: np.ndarray
    sample_rate: float
    subcarrier_freqs: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise CsiError(f"CSI data must be (antennas, subcarriers, time), got {data.shape}")
        if not np.iscomplexobj(data):
            data = data.astype(complex)
        freqs = np.asarray(self.subcarrier_freqs, dtype=float).reshape(-1)
        if freqs.shape[0] != data.shape[1]:
            raise CsiError("subcarrier_freqs length must match the subcarrier axis")
        if self.sample_rate <= 0.0:
            raise CsiError("sample_rate must be > 0")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "subcarrier_freqs", freqs)

    @property
    def n_antennas(self) -> int:
        return self.data.shape[0]

    @property
    def n_subcarriers(self) -> int:
        return self.data.shape[1]

    @property
    def n_samples(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class FeatureMap:
    """A 3 x H x W real tensor rendered from one (receiver, frame) CSI group."""

    data: np.ndarray
    receiver: int = -1
    frame: int = -1

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        if data.ndim != 3 or data.shape[0] != 3:
            raise CsiError(f"feature map must be 3 x H x W, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise CsiError("feature map contains non-finite values")
        object.__setattr__(self, "data", data)


def ratio(csi: CsiTensor, num_antenna: int = 0, den_antenna: int = 1, eps: float | None = None) -> CsiTensor:
    """CSI ratio between two antennas of one receiver.

    Shared multiplicative gain/phase noise divides out exactly.  Denominator
    entries with magnitude below ``eps`` (default 1e-8 of the median
    denominator magnitude) are clamped to ``eps`` at their original phase so
    the result stays finite.
    """
    if num_antenna == den_antenna:
        raise SameAntenna("numerator and denominator antennas must differ")
    a = csi.n_antennas
    if not (0 <= num_antenna < a and 0 <= den_antenna < a):
        raise CsiError(f"antenna index out of range for {a} antennas")
    num = csi.data[num_antenna]
    den = csi.data[den_antenna].copy()
    mag = np.abs(den)
    if eps is None:
        med = float(np.median(mag))
        eps = 1e-8 * med if med > 0.0 else 1e-8
    small = mag < eps
    if np.any(small):
        zero = small & (mag == 0.0)
        tiny = small & ~zero
        den[tiny] = eps * den[tiny] / mag[tiny]
        den[zero] = eps
    out = (num / den)[None, :, :]
    return CsiTensor(out, csi.sample_rate, csi.subcarrier_freqs)


def group(csi: CsiTensor, n_frames: int) -> list:
    """Split the time axis into exactly ``n_frames`` groups of floor(N_c / N_f) samples.

    Trailing samples that do not fill a whole group are dropped.
    """
    if n_frames < 1:
        raise CsiError("n_frames must be >= 1")
    g = csi.n_samples // n_frames
    if g == 0:
        raise TooFewSamples(f"{csi.n_samples} samples cannot fill {n_frames} groups")
    return [csi.data[:, :, i * g:(i + 1) * g] for i in range(n_frames)]


def _default_window(g: int) -> int:
    # G/4 rounded to the nearest power of two, at least 1.
    target = max(g / 4.0, 1.0)
    return int(2 ** max(round(np.log2(target)), 0))


def dfs(grp: np.ndarray, window: int | None = None, hop: int | None = None) -> np.ndarray:
    """Doppler spectrogram of one CSI group, DC-centered.

    The group (antennas x subcarriers x time) is collapsed to a single
    complex stream by averaging over antennas and subcarriers, then passed
    through a Hann-tapered short-time Fourier transform.  Returns the
    magnitude array (freq_bins x time_bins) with DC in the middle row.
    """
    grp = np.asarray(grp)
    if grp.ndim != 3:
        raise CsiError(f"group must be (antennas, subcarriers, time), got {grp.shape}")
    g = grp.shape[2]
    if window is None:
        window = _default_window(g)
    if window < 1:
        raise CsiError("window must be >= 1")
    if window > g:
        raise WindowTooLarge(f"window {window} exceeds group length {g}")
    if hop is None:
        hop = max(window // 2, 1)
    stream = grp.mean(axis=(0, 1))
    taper = np.hanning(window) if window > 1 else np.ones(1)
    starts = range(0, g - window + 1, hop)
    cols = [np.fft.fftshift(np.fft.fft(stream[s:s + window] * taper)) for s in starts]
    return np.abs(np.stack(cols, axis=1))


def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable bilinear resize with corner-aligned sampling."""
    image = np.asarray(image, dtype=float)
    h, w = image.shape
    ys = np.linspace(0.0, h - 1.0, out_h) if h > 1 else np.zeros(out_h)
    xs = np.linspace(0.0, w - 1.0, out_w) if w > 1 else np.zeros(out_w)
    y0 = np.clip(np.floor(ys).astype(int), 0, max(h - 2, 0))
    x0 = np.clip(np.floor(xs).astype(int), 0, max(w - 2, 0))
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    top = image[np.ix_(y0, x0)] * (1 - wx) + image[np.ix_(y0, x1)] * wx
    bot = image[np.ix_(y1, x0)] * (1 - wx) + image[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bot * wy


def _zscore(panel: np.ndarray) -> np.ndarray:
    std = panel.std()
    if std < 1e-12:
        return np.zeros_like(panel)
    return (panel - panel.mean()) / std


def features(grp: np.ndarray, size: int = 64, window: int | None = None, hop: int | None = None,
             receiver: int = -1, frame: int = -1) -> FeatureMap:
    """Render one CSI group into a 3 x size x size feature map.

    Panel layout (top to bottom): subcarrier-by-time magnitude, phase
    unwrapped along the subcarrier axis, and the Doppler spectrogram resized
    to the group width.  Each panel is z-scored independently, the stack is
    bilinearly resized to (size, size), and the result is replicated across
    three channels.
    """
    grp = np.asarray(grp)
    if grp.ndim != 3:
        raise CsiError(f"group must be (antennas, subcarriers, time), got {grp.shape}")
    mean_stream = grp.mean(axis=0)  # (subcarriers, time)
    magnitude = np.abs(mean_stream)
    phase = np.unwrap(np.angle(mean_stream), axis=0)
    doppler = dfs(grp, window=window, hop=hop)
    doppler = bilinear_resize(doppler, doppler.shape[0], mean_stream.shape[1])
    panel = np.vstack([_zscore(magnitude), _zscore(phase), _zscore(doppler)])
    resized = bilinear_resize(panel, size, size)
    return FeatureMap(np.broadcast_to(resized, (3, size, size)).copy(), receiver=receiver, frame=frame)
