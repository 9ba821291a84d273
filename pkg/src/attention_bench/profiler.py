"""Measurement of the resource indicators: power, energy, CPU time and disk I/O.

Power comes from a pluggable :class:`PowerSource`. A :class:`PowerSampler`
polls it on a background thread into an append-only log of
:class:`PowerSample` readings; epochs take boundary samples with
:meth:`PowerSampler.mark` and integrate the log with the trapezoidal rule.
"""

import abc
import csv
import logging
import os
import platform
import socket
import sys
import threading
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np
import psutil

from attention_bench.exceptions import ConfigError, PowerTraceError

logger = logging.getLogger(__name__)

DEFAULT_SAMPLE_PERIOD = 0.1
DEFAULT_CONSTANT_WATTS = 250.0
DEFAULT_PLATFORM_COUNTER = "/sys/class/powercap/intel-rapl:0/energy_uj"
DEFAULT_COUNTER_RANGE_UJ = 2**32
TRACE_HEADER = ("t_seconds", "watts")
POWER_TRACE_ENV = "ATTN_BENCH_POWER_TRACE"

Clock = Callable[[], float]


@dataclass(frozen=True)
class PowerSample:
    """A power reading ``watts`` taken ``t`` seconds after the run started."""

    t: float
    watts: float


@dataclass
class StepMetrics:
    """Measurements of one optimizer step.

    ``flops`` covers forward, backward and the optimizer update;
    ``forward_flops`` the forward pass alone. ``peak_bytes`` is the allocation
    high-water mark above the bytes that were live when the step began.
    """

    step: int
    wall_seconds: float
    flops: int
    forward_flops: int
    peak_bytes: int
    loss: float
    tokens: int

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochMetrics:
    """Aggregated measurements of one training epoch.

    Fields that could not be measured on this host are None.
    """

    epoch: int
    wall_seconds: float
    mean_loss: float
    steps: int
    tokens: int
    flops: int
    forward_flops: int
    peak_bytes: int
    energy_joules: Optional[float] = None
    mean_watts: Optional[float] = None
    cpu_process_seconds: Optional[float] = None
    cpu_percent: Optional[float] = None
    disk_bytes_read: Optional[int] = None
    disk_bytes_written: Optional[int] = None
    rss_peak_bytes: Optional[int] = None
    device_utilization: Optional[float] = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "EpochMetrics":
        return cls(**values)


def _validate_samples(samples: Sequence[PowerSample]) -> None:
    if len(samples) < 2:
        raise PowerTraceError(
            f"Energy integration needs at least 2 samples, got {len(samples)}."
        )
    for previous, current in zip(samples, samples[1:]):
        if current.t <= previous.t:
            raise PowerTraceError(
                f"Power samples must be strictly increasing in time ({previous.t} then {current.t})."
            )
    if any(sample.watts < 0 for sample in samples):
        raise PowerTraceError("Power samples cannot be negative.")


def energy_integrate(samples: Sequence[PowerSample]) -> float:
    """Joules under the piecewise-linear power curve through ``samples``.

    Args:
        samples (Sequence[PowerSample]): At least two samples, strictly increasing in ``t``.

    Raises:
        PowerTraceError: On fewer than two samples, non-increasing times or negative watts.

    Returns:
        float: Energy in joules (watts x seconds).
    """
    _validate_samples(samples)
    t = np.array([sample.t for sample in samples], dtype=np.float64)
    w = np.array([sample.watts for sample in samples], dtype=np.float64)
    return float(np.sum((w[1:] + w[:-1]) * np.diff(t)) / 2.0)


class PowerSource(abc.ABC):
    """Something that can report the power draw at a run-relative time."""

    name = "power"

    @property
    def available(self) -> bool:
        return True

    @abc.abstractmethod
    def read(self, t: float) -> Optional[float]:
        """Watts at ``t`` seconds into the run, or None when no reading is possible."""

    def describe(self) -> str:
        return self.name


class ConstantPowerSource(PowerSource):
    name = "constant"

    def __init__(self, watts: float):
        if watts < 0:
            raise ConfigError(f"Constant power must be non-negative, got {watts}.")
        self.watts = float(watts)

    def read(self, t: float) -> Optional[float]:
        return self.watts

    def describe(self) -> str:
        return f"constant:{self.watts:g}"


class AffinePowerSource(PowerSource):
    """``a + b * (FLOPs per second since the previous reading)``.

    Args:
        a (float): Idle watts.
        b (float): Watts per FLOP/s.
        flop_reader (Callable[[], int]): Returns the current cumulative FLOP count.
    """

    name = "affine"

    def __init__(self, a: float, b: float, flop_reader: Callable[[], int]):
        if a < 0 or b < 0:
            raise ConfigError(f"Affine power parameters must be non-negative, got a={a}, b={b}.")
        self.a = float(a)
        self.b = float(b)
        self.flop_reader = flop_reader
        self._last_t: Optional[float] = None
        self._last_flops = 0
        self._rate = 0.0

    def read(self, t: float) -> Optional[float]:
        flops = int(self.flop_reader())
        if self._last_t is not None and t > self._last_t:
            self._rate = max(0.0, (flops - self._last_flops) / (t - self._last_t))
        self._last_t = t
        self._last_flops = flops
        return self.a + self.b * self._rate

    def describe(self) -> str:
        return f"affine:{self.a:g},{self.b:g}"


def power_source_synthetic(
    model: str, *params: float, flop_reader: Optional[Callable[[], int]] = None
) -> PowerSource:
    """Build a synthetic power source.

    Args:
        model (str): ``"constant"`` with one parameter (watts) or ``"affine"``
            with two (``a``, ``b``).
        *params (float): Model parameters, all non-negative.
        flop_reader (Optional[Callable[[], int]], optional): Cumulative FLOP count,
            required for the affine model. Defaults to None.

    Raises:
        ConfigError: On an unknown model or invalid parameters.

    Returns:
        PowerSource: The configured source.
    """
    if model == "constant":
        if len(params) != 1:
            raise ConfigError("constant power takes exactly one parameter (watts).")
        return ConstantPowerSource(params[0])
    if model == "affine":
        if len(params) != 2:
            raise ConfigError("affine power takes exactly two parameters (a, b).")
        if flop_reader is None:
            raise ConfigError("affine power needs a FLOP reader.")
        return AffinePowerSource(params[0], params[1], flop_reader)
    raise ConfigError(f"Unknown synthetic power model '{model}'.")


def load_power_trace(path: Union[str, Path]) -> List[PowerSample]:
    """Parse a ``t_seconds,watts`` CSV power trace.

    Raises:
        PowerTraceError: On a missing header, unparsable or negative values,
            non-increasing times, or an empty data section. The error carries
            the 1-based line number.
    """
    samples: List[PowerSample] = []
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        header_seen = False
        for row in reader:
            line = reader.line_num
            if not row or not "".join(row).strip():
                continue
            cells = [cell.strip() for cell in row]
            if not header_seen:
                if tuple(cells) != TRACE_HEADER:
                    raise PowerTraceError(
                        f"expected header '{','.join(TRACE_HEADER)}', got '{','.join(cells)}'", line
                    )
                header_seen = True
                continue
            if len(cells) != 2:
                raise PowerTraceError(f"expected 2 columns, got {len(cells)}", line)
            try:
                t, watts = float(cells[0]), float(cells[1])
            except ValueError:
                raise PowerTraceError(f"not a number in '{','.join(cells)}'", line) from None
            if not (np.isfinite(t) and np.isfinite(watts)):
                raise PowerTraceError("values must be finite", line)
            if watts < 0:
                raise PowerTraceError(f"negative power {watts}", line)
            if samples and t <= samples[-1].t:
                raise PowerTraceError(
                    f"time {t} does not increase after {samples[-1].t}", line
                )
            samples.append(PowerSample(t, watts))
    if not header_seen:
        raise PowerTraceError("missing header", 1)
    if not samples:
        raise PowerTraceError("the trace has no samples")
    return samples


class FilePowerSource(PowerSource):
    """Replays a recorded trace, linearly interpolated and clamped at its ends."""

    name = "file"

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        samples = load_power_trace(self.path)
        self._t = np.array([s.t for s in samples], dtype=np.float64)
        self._w = np.array([s.watts for s in samples], dtype=np.float64)

    def read(self, t: float) -> Optional[float]:
        return float(np.interp(t, self._t, self._w))

    def describe(self) -> str:
        return f"file:{self.path}"


def power_source_file(path: Union[str, Path]) -> FilePowerSource:
    """Replay the ``t_seconds,watts`` trace at ``path``.

    Raises:
        PowerTraceError: If the trace is malformed.
    """
    return FilePowerSource(path)


def watts_from_counter(
    previous_uj: int, current_uj: int, seconds: float, max_range_uj: int = DEFAULT_COUNTER_RANGE_UJ
) -> float:
    """Average watts between two reads of a cumulative microjoule counter.

    A counter that went backwards wrapped around ``max_range_uj``.
    """
    delta = current_uj - previous_uj
    if delta < 0:
        delta += max_range_uj
    return delta / 1e6 / seconds


class PlatformPowerSource(PowerSource):
    """Power derived from a platform energy counter file of cumulative microjoules.

    The counter's wraparound modulus is read from ``max_energy_range_uj`` next
    to the counter when present, otherwise ``2**32`` microjoules. The first read
    only primes the counter, so the source yields a reading from the second
    call on. An unreadable counter disables the source with a warning.
    """

    name = "platform"

    def __init__(self, counter_path: Union[str, Path] = DEFAULT_PLATFORM_COUNTER):
        self.counter_path = Path(counter_path)
        self.max_range_uj = DEFAULT_COUNTER_RANGE_UJ
        self._available = True
        self._previous: Optional[tuple] = None
        range_file = self.counter_path.parent / "max_energy_range_uj"
        try:
            self.max_range_uj = int(range_file.read_text().strip())
        except (OSError, ValueError):
            pass
        self._available = self._read_counter() is not None

    @property
    def available(self) -> bool:
        return self._available

    def _read_counter(self) -> Optional[int]:
        try:
            return int(self.counter_path.read_text().strip())
        except PermissionError:
            logger.warning(
                "Permission denied reading energy counter %s; energy will be reported as unavailable.",
                self.counter_path,
            )
        except (OSError, ValueError) as exc:
            logger.debug("Energy counter %s unreadable: %s", self.counter_path, exc)
        self._available = False
        return None

    def read(self, t: float) -> Optional[float]:
        if not self._available:
            return None
        value = self._read_counter()
        if value is None:
            return None
        previous, self._previous = self._previous, (t, value)
        if previous is None or t <= previous[0]:
            return None
        return watts_from_counter(previous[1], value, t - previous[0], self.max_range_uj)

    def describe(self) -> str:
        return f"platform:{self.counter_path}"


def power_source_platform(
    counter_path: Union[str, Path] = DEFAULT_PLATFORM_COUNTER,
) -> PlatformPowerSource:
    """Power from a cumulative microjoule counter; an unreadable counter is not an error."""
    return PlatformPowerSource(counter_path)


def make_power_source(
    config: str,
    flop_reader: Optional[Callable[[], int]] = None,
    environ: Optional[Dict[str, str]] = None,
) -> PowerSource:
    """Build a power source from its configuration string.

    Accepted forms: ``constant:W``, ``affine:A,B``, ``file:PATH``,
    ``platform[:COUNTER_PATH]`` and ``auto``. ``auto`` degrades from the
    platform counter to the trace named by ``ATTN_BENCH_POWER_TRACE`` and
    finally to a constant 250 W.

    Raises:
        ConfigError: If the string cannot be parsed.
        PowerTraceError: If a trace file is malformed.
    """
    environ = os.environ if environ is None else environ
    kind, _, argument = config.partition(":")
    kind = kind.strip().lower()
    if kind in ("constant", "affine"):
        try:
            params = [float(p) for p in argument.split(",")] if argument else []
        except ValueError:
            raise ConfigError(f"Invalid power parameters in '{config}'.") from None
        return power_source_synthetic(kind, *params, flop_reader=flop_reader)
    if kind == "file":
        if not argument:
            raise ConfigError("file power source needs a path: file:PATH.")
        return power_source_file(argument)
    if kind == "platform":
        return power_source_platform(argument or DEFAULT_PLATFORM_COUNTER)
    if kind == "auto":
        source = PlatformPowerSource()
        if source.available:
            return source
        trace = environ.get(POWER_TRACE_ENV)
        if trace and Path(trace).is_file():
            logger.info("Platform energy counter unavailable, replaying %s.", trace)
            return FilePowerSource(trace)
        logger.info(
            "No power measurement available, using constant %g W.", DEFAULT_CONSTANT_WATTS
        )
        return ConstantPowerSource(DEFAULT_CONSTANT_WATTS)
    raise ConfigError(
        f"Unknown power source '{config}'. Use platform[:PATH], file:PATH, constant:W, affine:A,B or auto."
    )


class PowerSampler:
    """Polls a power source into an append-only sample log.

    Args:
        source (PowerSource): Where readings come from.
        period (float, optional): Seconds between background readings. Defaults to 0.1.
        clock (Clock, optional): Monotonic clock in seconds. Defaults to ``time.monotonic``.
    """

    def __init__(
        self,
        source: PowerSource,
        period: float = DEFAULT_SAMPLE_PERIOD,
        clock: Clock = time.monotonic,
    ):
        if period <= 0:
            raise ConfigError(f"Sampling period must be positive, got {period}.")
        self.source = source
        self.period = period
        self.clock = clock
        self.samples: List[PowerSample] = []
        self._t0: Optional[float] = None
        self._lock = threading.Lock()
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None

    @property
    def available(self) -> bool:
        return self.source.available

    def elapsed(self) -> float:
        if self._t0 is None:
            raise RuntimeError("PowerSampler has not been started.")
        return self.clock() - self._t0

    def _sample(self) -> float:
        with self._lock:
            t = self.elapsed()
            watts = self.source.read(t)
            if watts is not None and (not self.samples or t > self.samples[-1].t):
                self.samples.append(PowerSample(t, max(0.0, watts)))
            return t

    def mark(self) -> float:
        """Take a boundary sample now and return its run-relative time."""
        return self._sample()

    def start(self, background: bool = True) -> "PowerSampler":
        self._t0 = self.clock()
        self._stop.clear()
        self._sample()
        if background:
            self._thread = threading.Thread(
                target=self._run, name="power-sampler", daemon=True
            )
            self._thread.start()
        return self

    def _run(self) -> None:
        while not self._stop.wait(self.period):
            self._sample()

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join()
            self._thread = None

    def __enter__(self) -> "PowerSampler":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

    def window(self, t_start: float, t_end: float) -> List[PowerSample]:
        with self._lock:
            return [s for s in self.samples if t_start <= s.t <= t_end]

    def energy_between(self, t_start: float, t_end: float) -> Optional[float]:
        """Joules between two marks, or None when power is unavailable."""
        samples = self.window(t_start, t_end)
        if not self.available or len(samples) < 2:
            return None
        return energy_integrate(samples)


@dataclass
class CpuDiskSnapshot:
    """Process CPU seconds, cumulative I/O bytes and resident memory at one instant."""

    cpu_seconds: Optional[float]
    bytes_read: Optional[int]
    bytes_written: Optional[int]
    rss_bytes: Optional[int] = None


_warned: set = set()


def _warn_once(key: str, message: str, *args) -> None:
    if key not in _warned:
        _warned.add(key)
        logger.warning(message, *args)


def cpu_and_disk_snapshot(process: Optional[psutil.Process] = None) -> CpuDiskSnapshot:
    """Read the OS process accounting for CPU time and disk I/O.

    Character counts (``read_chars``) are preferred so reads served from the
    page cache still count; platforms without them fall back to block-level
    byte counts, and platforms without I/O accounting report None.
    """
    process = process or psutil.Process()
    cpu_seconds = None
    try:
        times = process.cpu_times()
        cpu_seconds = float(times.user + times.system)
    except (psutil.AccessDenied, AttributeError):
        _warn_once("cpu", "Process CPU accounting unavailable; CPU fields will be null.")

    bytes_read = bytes_written = None
    try:
        counters = process.io_counters()
        bytes_read = int(getattr(counters, "read_chars", counters.read_bytes))
        bytes_written = int(getattr(counters, "write_chars", counters.write_bytes))
    except (psutil.AccessDenied, AttributeError, NotImplementedError):
        _warn_once("io", "Process I/O accounting unavailable; disk fields will be null.")

    rss = None
    try:
        rss = int(process.memory_info().rss)
    except (psutil.AccessDenied, AttributeError):
        _warn_once("rss", "Process memory accounting unavailable; RSS will be null.")
    return CpuDiskSnapshot(cpu_seconds, bytes_read, bytes_written, rss)


def _delta(after, before):
    if after is None or before is None:
        return None
    return max(after - before, 0)


def snapshot_delta(before: CpuDiskSnapshot, after: CpuDiskSnapshot) -> CpuDiskSnapshot:
    """Non-negative per-interval deltas; RSS is taken from ``after``."""
    return CpuDiskSnapshot(
        cpu_seconds=_delta(after.cpu_seconds, before.cpu_seconds),
        bytes_read=_delta(after.bytes_read, before.bytes_read),
        bytes_written=_delta(after.bytes_written, before.bytes_written),
        rss_bytes=after.rss_bytes,
    )


def host_environment(power_source: Optional[PowerSource] = None, seed: Optional[int] = None) -> dict:
    """Description of the measuring host for the report's environment block."""
    memory = psutil.virtual_memory()
    return {
        "hostname": socket.gethostname(),
        "platform": platform.platform(),
        "processor": platform.processor() or platform.machine(),
        "cpu_count_logical": psutil.cpu_count(logical=True),
        "cpu_count_physical": psutil.cpu_count(logical=False),
        "memory_total_bytes": int(memory.total),
        "python_version": sys.version.split()[0],
        "numpy_version": np.__version__,
        "clock_resolution_seconds": time.get_clock_info("perf_counter").resolution,
        "power_source": power_source.describe() if power_source is not None else None,
        "seed": seed,
    }
