"""Dataset plumbing: synthetic suites, timestamp ingestion, persistence.

All file formats are plain delimiter-separated text with small headers, so
artifacts diff cleanly and round-trip exactly (reals are written with 17
significant digits, which reproduces float64 bit-for-bit).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import UsageError
from .distributions import make_hidden_dist
from .generative import (
    GenerativeParams,
    HiddenSample,
    SimulationDivergence,
    SpikeTrain,
    generate,
)
from .rng import SeededRng
from .training import TrainConfig
from .variational import VariationalParams

log = logging.getLogger(__name__)

MAX_MEAN_COUNT = 20.0  # sanity bound on synthetic trains, counts per bin


class FormatError(ValueError):
    """A persisted file does not parse; the message names the line."""


@dataclass
class Dataset:
    """A collection of spike trains with a train/test split.

    Synthetic datasets carry the generating parameters (and the hidden
    trains, for diagnostics only); externally ingested ones carry their
    source path instead.
    """

    trains: list
    train_indices: list[int]
    test_indices: list[int]
    theta_true: GenerativeParams | None = None
    hidden_trains: list | None = None
    source: str = "synthetic"

    def __post_init__(self):
        overlap = set(self.train_indices) & set(self.test_indices)
        if overlap:
            raise UsageError(f"split indices overlap: {sorted(overlap)}")
        covered = set(self.train_indices) | set(self.test_indices)
        if covered != set(range(len(self.trains))):
            raise UsageError("split must cover every train exactly once")
        neurons = {t.num_neurons for t in self.trains}
        widths = {t.bin_width for t in self.trains}
        if len(neurons) > 1 or len(widths) > 1:
            raise UsageError("all trains must share the neuron count and bin width")

    @property
    def training_trains(self) -> list:
        return [self.trains[i] for i in self.train_indices]

    @property
    def test_trains(self) -> list:
        return [self.trains[i] for i in self.test_indices]


def draw_generative_params(v: int, h: int, rng: SeededRng) -> GenerativeParams:
    """Weights Unif(-2, 2) and biases Unif(-0.5, 0.5)."""
    n = v + h
    return GenerativeParams(
        b=rng.uniform_range(-0.5, 0.5, size=n),
        W=rng.uniform_range(-2.0, 2.0, size=(n, n)),
        V=v,
    )


def generate_synthetic_suite(
    trials: int,
    rng: SeededRng,
    v: int = 3,
    h: int = 2,
    num_bins: int = 100,
    n_train: int = 40,
    n_test: int = 20,
    max_redraws: int = 200,
) -> list[Dataset]:
    """Per trial: a fresh random parameter set and train/test spike trains.

    Parameter sets whose simulation diverges (or produces implausibly dense
    trains) are redrawn with a fresh stream and the event logged.
    """
    dist = make_hidden_dist("pois")
    suite = []
    for trial in range(trials):
        for attempt in range(max_redraws):
            trial_rng = rng.derive(trial, attempt)
            theta = draw_generative_params(v, h, trial_rng.derive(0))
            try:
                visible, hidden = [], []
                for i in range(n_train + n_test):
                    x, z = generate(theta, num_bins, dist, rng=trial_rng.derive(1 + i))
                    visible.append(x)
                    hidden.append(z)
            except SimulationDivergence as err:
                log.info("trial %d redraw %d: %s", trial, attempt, err)
                continue
            mean_count = float(np.mean([t.counts.mean() for t in visible]))
            if not math.isfinite(mean_count) or mean_count >= MAX_MEAN_COUNT:
                log.info(
                    "trial %d redraw %d: mean count %.2f too dense", trial, attempt, mean_count
                )
                continue
            suite.append(
                Dataset(
                    trains=visible,
                    train_indices=list(range(n_train)),
                    test_indices=list(range(n_train, n_train + n_test)),
                    theta_true=theta,
                    hidden_trains=hidden,
                )
            )
            break
        else:
            raise RuntimeError(f"could not draw a stable parameter set for trial {trial}")
    return suite


def bin_timestamps(events, dt: float, t_end: float, num_neurons: int | None = None) -> SpikeTrain:
    """Bin (time, neuron) events into counts; bins are [s*dt, (s+1)*dt)."""
    if dt <= 0:
        raise UsageError("bin width must be positive")
    events = list(events)
    num_bins = max(1, math.ceil(t_end / dt))
    if num_neurons is None:
        num_neurons = 1 + max((int(n) for _, n in events), default=0)
    counts = np.zeros((num_bins, num_neurons), dtype=np.int64)
    for i, (time_s, neuron) in enumerate(events):
        neuron = int(neuron)
        if time_s < 0 or time_s >= t_end:
            raise UsageError(f"event {i}: time {time_s} outside [0, {t_end})")
        if not 0 <= neuron < num_neurons:
            raise UsageError(f"event {i}: neuron index {neuron} out of range")
        counts[int(time_s / dt), neuron] += 1
    return SpikeTrain(counts, bin_width=dt)


def segment(train: SpikeTrain, piece_length: int) -> list[SpikeTrain]:
    """Consecutive non-overlapping pieces; a short tail is dropped and logged."""
    if piece_length < 2:
        raise UsageError("pieces must span at least two bins")
    if piece_length > train.num_bins:
        raise UsageError(
            f"piece length {piece_length} exceeds the train length {train.num_bins}"
        )
    n_pieces = train.num_bins // piece_length
    dropped = train.num_bins - n_pieces * piece_length
    if dropped:
        log.info("segment: dropping %d trailing bins", dropped)
    return [
        SpikeTrain(
            train.counts[i * piece_length : (i + 1) * piece_length],
            bin_width=train.bin_width,
        )
        for i in range(n_pieces)
    ]


# ---------------------------------------------------------------------------
# persistence: plain text, 17-significant-digit reals


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _fmt_row(values) -> str:
    return "\t".join(_fmt(v) for v in values)


def _parse_error(path, line_no, msg):
    raise FormatError(f"{path}:{line_no}: {msg}")


def save_spike_train(train: SpikeTrain, path) -> None:
    path = Path(path)
    width = "none" if train.bin_width is None else _fmt(train.bin_width)
    lines = [f"# spike_train neurons={train.num_neurons} bin_width={width}"]
    for row in train.counts:
        lines.append("\t".join(str(int(v)) for v in row))
    path.write_text("\n".join(lines) + "\n")


def load_spike_train(path) -> SpikeTrain:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or not lines[0].startswith("# spike_train"):
        _parse_error(path, 1, "missing spike_train header")
    header = dict(kv.split("=") for kv in lines[0].split()[2:])
    neurons = int(header["neurons"])
    width = None if header["bin_width"] == "none" else float(header["bin_width"])
    rows = []
    for i, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != neurons:
            _parse_error(path, i, f"expected {neurons} columns, got {len(parts)}")
        try:
            rows.append([int(p) for p in parts])
        except ValueError:
            _parse_error(path, i, "non-integer count")
    return SpikeTrain(np.array(rows, dtype=np.int64), bin_width=width)


def save_events(events, path) -> None:
    path = Path(path)
    lines = ["# events time\tneuron"]
    for time_s, neuron in events:
        lines.append(f"{_fmt(time_s)}\t{int(neuron)}")
    path.write_text("\n".join(lines) + "\n")


def load_events(path) -> list[tuple[float, int]]:
    path = Path(path)
    out = []
    for i, line in enumerate(path.read_text().splitlines(), start=1):
        if line.startswith("#") or not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            _parse_error(path, i, "expected 'time<TAB>neuron'")
        try:
            out.append((float(parts[0]), int(parts[1])))
        except ValueError:
            _parse_error(path, i, "malformed event record")
    return out


def save_generative_params(params: GenerativeParams, path) -> None:
    path = Path(path)
    lines = [f"# generative_params V={params.V} H={params.H}"]
    lines.append("b\t" + _fmt_row(params.b))
    for row in params.W:
        lines.append("W\t" + _fmt_row(row))
    path.write_text("\n".join(lines) + "\n")


def load_generative_params(path, expect_v: int | None = None, expect_h: int | None = None) -> GenerativeParams:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or not lines[0].startswith("# generative_params"):
        _parse_error(path, 1, "missing generative_params header")
    header = dict(kv.split("=") for kv in lines[0].split()[2:])
    v, h = int(header["V"]), int(header["H"])
    if expect_v is not None and v != expect_v:
        _parse_error(path, 1, f"expected V={expect_v}, file has V={v}")
    if expect_h is not None and h != expect_h:
        _parse_error(path, 1, f"expected H={expect_h}, file has H={h}")
    n = v + h
    b, w_rows = None, []
    for i, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        tag, _, rest = line.partition("\t")
        values = [float(p) for p in rest.split("\t")]
        if tag == "b":
            if len(values) != n:
                _parse_error(path, i, f"bias length {len(values)} != {n}")
            b = np.array(values)
        elif tag == "W":
            if len(values) != n:
                _parse_error(path, i, f"weight row length {len(values)} != {n}")
            w_rows.append(values)
        else:
            _parse_error(path, i, f"unknown record {tag!r}")
    if b is None or len(w_rows) != n:
        _parse_error(path, len(lines), f"expected one bias row and {n} weight rows")
    return GenerativeParams(b=b, W=np.array(w_rows), V=v)


def save_variational_params(phi: VariationalParams, path) -> None:
    path = Path(path)
    c = np.atleast_2d(np.asarray(phi.c, dtype=np.float64))
    c_kind = "th" if np.ndim(phi.c) == 2 else "h"
    lines = [f"# variational_params V={phi.V} H={phi.H} c_kind={c_kind}"]
    for row in c:
        lines.append("c\t" + _fmt_row(row))
    for row in phi.A:
        lines.append("A\t" + _fmt_row(row))
    path.write_text("\n".join(lines) + "\n")


def load_variational_params(path) -> VariationalParams:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or not lines[0].startswith("# variational_params"):
        _parse_error(path, 1, "missing variational_params header")
    header = dict(kv.split("=") for kv in lines[0].split()[2:])
    v, h, c_kind = int(header["V"]), int(header["H"]), header["c_kind"]
    c_rows, a_rows = [], []
    for i, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        tag, _, rest = line.partition("\t")
        values = [float(p) for p in rest.split("\t")]
        if tag == "c":
            if len(values) != h:
                _parse_error(path, i, f"c row length {len(values)} != {h}")
            c_rows.append(values)
        elif tag == "A":
            if len(values) != v + h:
                _parse_error(path, i, f"A row length {len(values)} != {v + h}")
            a_rows.append(values)
        else:
            _parse_error(path, i, f"unknown record {tag!r}")
    if len(a_rows) != v + h:
        _parse_error(path, len(lines), f"expected {v + h} A rows")
    c = np.array(c_rows)
    if c_kind == "h":
        c = c[0]
    return VariationalParams(c=c, A=np.array(a_rows), V=v)


def save_train_config(config: TrainConfig, path) -> None:
    path = Path(path)
    lines = ["# train_config"]
    for name, value in vars(config).items():
        if isinstance(value, float):
            lines.append(f"{name}={_fmt(value)}")
        else:
            lines.append(f"{name}={value}")
    path.write_text("\n".join(lines) + "\n")


_CONFIG_TYPES = {
    "method": str,
    "scheme": str,
    "nonlinearity": str,
    "hidden": int,
    "epochs": int,
    "batch_size": int,
    "k": int,
    "seed": int,
    "m": int,
    "basis_length": int,
    "learning_rate": float,
    "tau": float,
    "clip_norm": float,
}


def load_train_config(path) -> TrainConfig:
    path = Path(path)
    fields: dict = {}
    for i, line in enumerate(path.read_text().splitlines(), start=1):
        if line.startswith("#") or not line.strip():
            continue
        key, eq, value = line.partition("=")
        if not eq:
            _parse_error(path, i, "expected key=value")
        if key not in _CONFIG_TYPES:
            _parse_error(path, i, f"unknown config field {key!r}")
        fields[key] = _CONFIG_TYPES[key](value)
    try:
        return TrainConfig(**fields)
    except TypeError as err:
        raise FormatError(f"{path}: incomplete config ({err})")


RESULT_HEADER = "method\tscheme\tH\tseed\ttest_ll\tweight_error\tbias_error\twall_time_s"


def save_results_table(results, path) -> None:
    """Fixed-header experiment table; see RESULT_HEADER for the columns."""
    path = Path(path)
    lines = [RESULT_HEADER]
    for r in results:
        lines.append(
            "\t".join(
                [
                    r.method,
                    r.scheme,
                    str(r.hidden),
                    str(r.seed),
                    _fmt(r.test_ll),
                    _fmt(r.weight_error),
                    _fmt(r.bias_error),
                    _fmt(r.wall_time_s),
                ]
            )
        )
    path.write_text("\n".join(lines) + "\n")


def load_results_table(path) -> list[dict]:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or lines[0] != RESULT_HEADER:
        _parse_error(path, 1, "missing results header")
    out = []
    for i, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 8:
            _parse_error(path, i, f"expected 8 columns, got {len(parts)}")
        out.append(
            {
                "method": parts[0],
                "scheme": parts[1],
                "hidden": int(parts[2]),
                "seed": int(parts[3]),
                "test_ll": float(parts[4]),
                "weight_error": float(parts[5]),
                "bias_error": float(parts[6]),
                "wall_time_s": float(parts[7]),
            }
        )
    return out


def save_hidden_sample(sample: HiddenSample, path) -> None:
    path = Path(path)
    data = np.asarray(sample.data, dtype=np.float64)
    shape = "x".join(str(s) for s in data.shape)
    lines = [f"# hidden_sample kind={sample.kind} shape={shape}"]
    for row in data.reshape(data.shape[0], -1):
        lines.append(_fmt_row(row))
    path.write_text("\n".join(lines) + "\n")


def save_suite(suite: list[Dataset], out_dir) -> None:
    """Trial directories with true params, split train/test files, and the
    hidden trains kept for diagnostics."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for trial, dataset in enumerate(suite):
        trial_dir = out_dir / f"trial_{trial:02d}"
        trial_dir.mkdir(parents=True, exist_ok=True)
        if dataset.theta_true is not None:
            save_generative_params(dataset.theta_true, trial_dir / "true_params.txt")
        for j, idx in enumerate(dataset.train_indices):
            save_spike_train(dataset.trains[idx], trial_dir / f"train_{j:03d}.txt")
            if dataset.hidden_trains is not None:
                save_hidden_sample(
                    dataset.hidden_trains[idx], trial_dir / f"hidden_train_{j:03d}.txt"
                )
        for j, idx in enumerate(dataset.test_indices):
            save_spike_train(dataset.trains[idx], trial_dir / f"test_{j:03d}.txt")
            if dataset.hidden_trains is not None:
                save_hidden_sample(
                    dataset.hidden_trains[idx], trial_dir / f"hidden_test_{j:03d}.txt"
                )


def load_suite(suite_dir) -> list[Dataset]:
    suite_dir = Path(suite_dir)
    trial_dirs = sorted(p for p in suite_dir.iterdir() if p.name.startswith("trial_"))
    if not trial_dirs:
        raise FormatError(f"{suite_dir}: no trial directories found")
    suite = []
    for trial_dir in trial_dirs:
        train_files = sorted(trial_dir.glob("train_*.txt"))
        test_files = sorted(trial_dir.glob("test_*.txt"))
        trains = [load_spike_train(p) for p in train_files + test_files]
        params_file = trial_dir / "true_params.txt"
        theta = load_generative_params(params_file) if params_file.exists() else None
        suite.append(
            Dataset(
                trains=trains,
                train_indices=list(range(len(train_files))),
                test_indices=list(range(len(train_files), len(trains))),
                theta_true=theta,
                source=str(trial_dir),
            )
        )
    return suite
