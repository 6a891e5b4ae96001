"""Image-source room impulse responses and per-step observation rendering.

Each step the whole source clip is re-synthesised at the agent's current
pose: the RIR is rebuilt from scratch for every microphone and convolved
with the full source signal, then cut to the clip length. Nothing is
interpolated between poses.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy import signal as sps
from scipy.io import wavfile

from .errors import ConfigurationError, DegenerateGeometryError, DomainError
from .geometry import MicArraySpec, RoomSpec, SourceSpec

# below this distance (m) a mic is considered to coincide with an image
_MIN_DISTANCE = 1e-6


@dataclass(frozen=True)
class AcousticParams:
    c: float = 343.0
    max_order: int = 0
    f_s: int = 16000
    frac_delay_len: int = 81

    def __post_init__(self) -> None:
        if not self.c > 0:
            raise ConfigurationError("speed of sound must be positive")
        if self.max_order < 0:
            raise ConfigurationError("max_order must be >= 0")
        if self.f_s <= 0:
            raise ConfigurationError("f_s must be positive")
        if self.frac_delay_len < 1 or self.frac_delay_len % 2 == 0:
            raise ConfigurationError("frac_delay_len must be a positive odd number")


@dataclass(frozen=True)
class ImageSource:
    position: tuple[float, float, float]
    reflection_gain: float
    order: int


@dataclass(frozen=True)
class SourceSignal:
    id: int
    samples: np.ndarray
    loop: bool = False

    def __post_init__(self) -> None:
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ConfigurationError("a source signal must be a non-empty mono array")
        if np.max(np.abs(self.samples)) > 1.0:
            raise ConfigurationError("source signal peak exceeds 1")


def enumerate_image_sources(room: RoomSpec, src: Sequence[float], max_order: int) -> list[ImageSource]:
    """All mirror images of ``src`` reached with at most ``max_order`` wall reflections.

    Along each axis an image is indexed by an integer ``k`` and a parity
    ``q``; its coordinate is ``(1 - 2q) * p + 2 k L`` and it has bounced
    ``|k - q|`` times off the wall at 0 and ``|k|`` times off the wall at
    ``L``. Images whose gain vanishes (fully absorbing walls) are dropped.
    The direct source is always first.
    """
    src = np.asarray(src, dtype=float)
    if not room.contains(src):
        raise DomainError(f"source {src} outside the room")
    if max_order < 0:
        raise ConfigurationError("max_order must be >= 0")
    beta = np.sqrt(1.0 - room.absorption_per_wall()).reshape(3, 2)
    dims = np.asarray(room.dims, dtype=float)

    # per-axis candidates: (coordinate, reflection count, gain)
    axes = []
    for ax in range(3):
        coords, orders, gains = [], [], []
        for k in range(-max_order, max_order + 1):
            for q in (0, 1):
                n_low, n_high = abs(k - q), abs(k)
                if n_low + n_high > max_order:
                    continue
                coords.append((1 - 2 * q) * src[ax] + 2 * k * dims[ax])
                orders.append(n_low + n_high)
                gains.append(beta[ax, 0] ** n_low * beta[ax, 1] ** n_high)
        axes.append((np.array(coords), np.array(orders), np.array(gains)))

    (cx, ox, gx), (cy, oy, gy), (cz, oz, gz) = axes
    order = ox[:, None, None] + oy[None, :, None] + oz[None, None, :]
    gain = gx[:, None, None] * gy[None, :, None] * gz[None, None, :]
    keep = (order <= max_order) & (gain > 0)
    ix, iy, iz = np.nonzero(keep)
    # direct path first, then by order, then by position for a stable listing
    idx = np.lexsort((cz[iz], cy[iy], cx[ix], order[ix, iy, iz]))
    return [
        ImageSource(
            position=(float(cx[ix[i]]), float(cy[iy[i]]), float(cz[iz[i]])),
            reflection_gain=float(gain[ix[i], iy[i], iz[i]]),
            order=int(order[ix[i], iy[i], iz[i]]),
        )
        for i in idx
    ]


def fractional_delay_taps(delay: float, length: int) -> tuple[int, np.ndarray]:
    """Hann-windowed sinc interpolator centred on ``delay`` samples.

    Returns ``(first_index, taps)`` with ``length`` taps starting at
    ``round(delay) - length // 2``.
    """
    half = length // 2
    start = int(np.round(delay)) - half
    t = np.arange(start, start + length) - delay
    window = 0.5 * (1.0 + np.cos(np.pi * t / (half + 1)))
    return start, window * np.sinc(t)


def render_rir(images: Sequence[ImageSource], mic: Sequence[float], params: AcousticParams) -> np.ndarray:
    """Sum of delayed, attenuated sinc pulses, one per image.

    Each image at distance ``d`` contributes amplitude ``gain / d`` at a
    delay of ``d * f_s / c`` samples. Taps that would fall before time
    zero are dropped.
    """
    if len(images) == 0:
        raise DomainError("render_rir needs at least one image source")
    mic = np.asarray(mic, dtype=float)
    pos = np.array([im.position for im in images], dtype=float)
    gains = np.array([im.reflection_gain for im in images], dtype=float)
    dist = np.linalg.norm(pos - mic[None, :], axis=1)
    if np.any(dist < _MIN_DISTANCE):
        raise DegenerateGeometryError("microphone coincides with a source image")

    L = params.frac_delay_len
    half = L // 2
    delays = dist * params.f_s / params.c
    starts = np.round(delays).astype(np.int64) - half
    t = starts[:, None] + np.arange(L)[None, :] - delays[:, None]
    taps = (gains / dist)[:, None] * 0.5 * (1.0 + np.cos(np.pi * t / (half + 1))) * np.sinc(t)

    n = int(starts.max()) + L
    rir = np.zeros(max(n, 1))
    idx = starts[:, None] + np.arange(L)[None, :]
    ok = idx >= 0
    np.add.at(rir, idx[ok], taps[ok])
    return rir


def band_limited_noise(signal_id: int, n_samples: int, f_s: int, band: tuple[float, float] = (200.0, 6000.0)) -> np.ndarray:
    """Deterministic pseudo-noise burst for ``signal_id``, peak 0.9, 5 ms fades."""
    rng = np.random.default_rng([0x5EED, int(signal_id)])
    white = rng.standard_normal(n_samples)
    spec = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(n_samples, 1.0 / f_s)
    spec[(freqs < band[0]) | (freqs > band[1])] = 0.0
    x = np.fft.irfft(spec, n_samples)
    fade = min(int(0.005 * f_s), n_samples // 2)
    if fade > 0:
        ramp = 0.5 * (1 - np.cos(np.pi * np.arange(fade) / fade))
        x[:fade] *= ramp
        x[-fade:] *= ramp[::-1]
    peak = np.max(np.abs(x))
    return 0.9 * x / peak if peak > 0 else x


def load_wav(path: str | Path, f_s: int) -> np.ndarray:
    """Read a mono WAV file as floats in [-1, 1], resampled to ``f_s``."""
    rate, data = wavfile.read(path)
    data = np.asarray(data)
    if data.ndim != 1:
        raise ConfigurationError(f"{path}: expected a mono WAV file")
    if np.issubdtype(data.dtype, np.integer):
        x = data.astype(np.float64) / float(np.iinfo(data.dtype).max)
    else:
        x = data.astype(np.float64)
    if rate != f_s:
        g = np.gcd(int(rate), int(f_s))
        x = sps.resample_poly(x, f_s // g, rate // g)
    peak = np.max(np.abs(x)) if x.size else 0.0
    return x / peak if peak > 1.0 else x


class SignalBank:
    """Source waveforms keyed by signal id.

    Ids without an explicit entry fall back to ``band_limited_noise`` of
    ``default_seconds`` duration.
    """

    def __init__(
        self,
        f_s: int = 16000,
        default_seconds: float = 0.5,
        files: Optional[Mapping[int, str | Path]] = None,
        loop: bool = False,
    ) -> None:
        self.f_s = f_s
        self.default_seconds = default_seconds
        self.loop = loop
        self._cache: dict[int, SourceSignal] = {}
        for sid, path in (files or {}).items():
            self._cache[int(sid)] = SourceSignal(int(sid), load_wav(path, f_s), loop)

    def __getitem__(self, signal_id: int) -> SourceSignal:
        sig = self._cache.get(signal_id)
        if sig is None:
            n = max(1, int(round(self.default_seconds * self.f_s)))
            sig = SourceSignal(signal_id, band_limited_noise(signal_id, n, self.f_s), self.loop)
            self._cache[signal_id] = sig
        return sig


def _convolve_clip(x: np.ndarray, rir: np.ndarray, n_out: int, loop: bool) -> np.ndarray:
    nz = np.flatnonzero(rir)
    if nz.size == 0:
        return np.zeros(n_out)
    lo, hi = int(nz[0]), int(nz[-1]) + 1
    kernel = rir[lo:hi]
    if loop:
        # steady state of a source repeating with period len(x)
        ext = x[(np.arange(n_out + hi) - hi) % x.size]
        full = sps.convolve(ext, kernel, method="auto")
        return full[hi - lo : hi - lo + n_out]
    y = np.zeros(n_out)
    if lo >= n_out:
        return y
    full = sps.convolve(x, kernel, method="auto")
    m = min(n_out - lo, full.size)
    y[lo : lo + m] = full[:m]
    return y


class SceneRenderer:
    """Renders the K-channel waveform heard at an agent pose.

    Calling the renderer with ``(agent_centre, active_sources)`` returns an
    array of shape ``(K, clip_samples)``. It holds no mutable state besides
    the signal cache and can be shared by threads.
    """

    def __init__(
        self,
        room: RoomSpec,
        mics: MicArraySpec,
        bank: SignalBank,
        params: AcousticParams,
        clip_seconds: float,
    ) -> None:
        if bank.f_s != params.f_s:
            raise ConfigurationError("signal bank and acoustic parameters disagree on f_s")
        self.room = room
        self.mics = mics
        self.bank = bank
        self.params = params
        self.n_samples = int(round(clip_seconds * params.f_s))
        self._images: dict[tuple, list[ImageSource]] = {}

    def images_for(self, position: Sequence[float]) -> list[ImageSource]:
        key = tuple(float(v) for v in position)
        imgs = self._images.get(key)
        if imgs is None:
            imgs = enumerate_image_sources(self.room, key, self.params.max_order)
            self._images[key] = imgs
        return imgs

    def __call__(self, agent: np.ndarray, sources: Sequence[SourceSpec]) -> np.ndarray:
        return render_observation(
            self.room, sources, agent, self.mics, self.bank, self.params,
            self.n_samples / self.params.f_s, images=self.images_for,
        )


def render_observation(
    room: RoomSpec,
    sources: Sequence[SourceSpec],
    agent: Sequence[float],
    mics: MicArraySpec,
    signal_bank: SignalBank,
    params: AcousticParams,
    clip_seconds: float,
    images=None,
) -> np.ndarray:
    """Sum over active sources of ``signal * RIR`` at every microphone."""
    n = int(round(clip_seconds * params.f_s))
    out = np.zeros((mics.n_mics, n))
    mic_pos = mics.positions(np.asarray(agent, dtype=float))
    for src in sources:
        imgs = images(src.position) if images else enumerate_image_sources(room, src.position, params.max_order)
        sig = signal_bank[src.signal_id]
        for m in range(mics.n_mics):
            rir = render_rir(imgs, mic_pos[m], params)
            out[m] += _convolve_clip(sig.samples, rir, n, sig.loop)
    return out


def write_wav(path: str | Path, waveform: np.ndarray, f_s: int) -> None:
    """Write 16-bit PCM; multichannel input is ``(K, n)`` and is written interleaved."""
    x = np.asarray(waveform, dtype=float)
    if x.ndim == 2:
        x = x.T
    pcm = np.clip(np.round(x * 32767.0), -32768, 32767).astype("<i2")
    wavfile.write(path, int(f_s), pcm)
