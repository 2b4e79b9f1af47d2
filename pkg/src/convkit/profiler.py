"""Per-layer wall-clock timing of forward passes.

Each layer is timed individually inside a repeated forward pass; warmup
passes are discarded so one-time costs (allocation, BLAS thread spin-up)
do not pollute the statistics.  Per-kind totals are computed with the
builtin sum over Python floats in a fixed order, so aggregate figures are
exactly reproducible from the recorded per-layer times.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from . import layers as L
from .network import Network, NetworkSpec, WeightBundle

KINDS = ("conv", "fc", "pool", "neuron", "other")


@dataclass
class TimingProfile:
    names: list
    kinds: list  # one of KINDS per layer
    times: np.ndarray  # (repeats, layers) seconds, warmup already dropped
    pass_times: np.ndarray  # (repeats,) whole-pass wall seconds
    batch_shape: tuple
    threads: int | None

    @property
    def repeats(self):
        return self.times.shape[0]

    def layer_totals(self):
        """Per-layer summed seconds as Python floats, in layer order."""
        return [sum(float(v) for v in self.times[:, i])
                for i in range(len(self.names))]

    def layer_means(self):
        return self.times.mean(axis=0)

    def layer_stds(self):
        return self.times.std(axis=0)

    def layer_medians(self):
        return np.median(self.times, axis=0)

    def kind_totals(self):
        """Summed seconds per layer kind; exact sums of layer totals."""
        totals = self.layer_totals()
        return {k: sum(t for t, kind in zip(totals, self.kinds) if kind == k)
                for k in KINDS}

    def total(self):
        return sum(self.kind_totals().values())

    def kind_shares(self):
        grand = self.total()
        return {k: v / grand for k, v in self.kind_totals().items()}

    def top_layers(self, n=3):
        """Layer names ranked by total time, slowest first."""
        totals = self.layer_totals()
        order = sorted(range(len(totals)), key=lambda i: -totals[i])
        return [self.names[i] for i in order[:n]]


def profile_forward(spec: NetworkSpec, bundle: WeightBundle, batch,
                    repeats=5, warmup=1, mode="test", threads=1,
                    rng=None) -> TimingProfile:
    """Time each layer across ``repeats`` forward passes after ``warmup``.

    ``threads=1`` pins BLAS pools to one thread so per-layer attribution
    is unambiguous; pass None to leave the ambient configuration alone.
    """
    if repeats < 3:
        raise ValueError(f"repeats must be >= 3, got {repeats}")
    if warmup < 1:
        raise ValueError(f"warmup must be >= 1, got {warmup}")
    net = Network(spec, bundle)
    batch = np.asarray(batch)
    n_layers = len(net.layers)
    times = np.zeros((warmup + repeats, n_layers))
    pass_times = np.zeros(warmup + repeats)

    def run_all():
        ctx = L.ForwardContext(mode=mode, rng=rng)
        for r in range(warmup + repeats):
            x = batch
            t_pass = time.perf_counter()
            for i, layer in enumerate(net.layers):
                t0 = time.perf_counter()
                y, _ = layer.forward(x, ctx)
                times[r, i] = time.perf_counter() - t0
                x = y
            pass_times[r] = time.perf_counter() - t_pass

    if threads is None:
        run_all()
    else:
        with threadpool_limits(limits=threads):
            run_all()
    return TimingProfile(
        names=[l.name for l in net.layers],
        kinds=[l.kind for l in net.layers],
        times=times[warmup:].copy(),
        pass_times=pass_times[warmup:].copy(),
        batch_shape=tuple(batch.shape),
        threads=threads,
    )


def format_table(profile: TimingProfile) -> str:
    """Fixed-width text table of per-layer and per-kind timings."""
    lines = []
    header = (f"{'layer':<12}{'kind':<8}{'mean ms':>10}{'std ms':>10}"
              f"{'median ms':>11}{'total ms':>11}")
    lines.append(header)
    lines.append("-" * len(header))
    means = profile.layer_means()
    stds = profile.layer_stds()
    medians = profile.layer_medians()
    totals = profile.layer_totals()
    for i, name in enumerate(profile.names):
        lines.append(
            f"{name:<12}{profile.kinds[i]:<8}{means[i] * 1e3:>10.3f}"
            f"{stds[i] * 1e3:>10.3f}{medians[i] * 1e3:>11.3f}"
            f"{totals[i] * 1e3:>11.3f}"
        )
    lines.append("-" * len(header))
    kind_totals = profile.kind_totals()
    shares = profile.kind_shares()
    for k in KINDS:
        lines.append(f"{'kind:' + k:<20}{kind_totals[k] * 1e3:>10.3f} ms"
                     f"{shares[k]:>9.1%}")
    lines.append(f"{'total':<20}{profile.total() * 1e3:>10.3f} ms")
    return "\n".join(lines) + "\n"


def profile_csv(profile: TimingProfile, path):
    """Per-layer rows then kind:* summary rows, one flat CSV, times in ms."""
    means = profile.layer_means()
    stds = profile.layer_stds()
    medians = profile.layer_medians()
    totals = profile.layer_totals()
    grand = profile.total()
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("layer,kind,mean_ms,std_ms,median_ms,total_ms,share\n")
        for i, name in enumerate(profile.names):
            f.write(
                f"{name},{profile.kinds[i]},{float(means[i] * 1e3)!r},"
                f"{float(stds[i] * 1e3)!r},{float(medians[i] * 1e3)!r},"
                f"{totals[i] * 1e3!r},{totals[i] / grand!r}\n"
            )
        kind_totals = profile.kind_totals()
        shares = profile.kind_shares()
        for k in KINDS:
            f.write(f"kind:{k},{k},,,,{kind_totals[k] * 1e3!r},{shares[k]!r}\n")


def render_pie(profile: TimingProfile, path, title=None):
    """Pie chart of the per-kind time shares."""
    from .plotting import kind_color, new_figure, save_figure

    shares = profile.kind_shares()
    used = [k for k in KINDS if shares[k] > 0]
    fig, ax = new_figure(figsize=(5.0, 5.0))
    ax.pie(
        [shares[k] for k in used],
        labels=used,
        colors=[kind_color(k) for k in used],
        autopct="%1.1f%%",
        startangle=90,
        counterclock=False,
    )
    ax.set_title(title or "forward time by layer kind")
    save_figure(fig, path)


def render_profile(profile: TimingProfile, table_path=None, pie_path=None) -> str:
    """Produce the text table (returned) and optional CSV/pie artifacts."""
    table = format_table(profile)
    if table_path:
        profile_csv(profile, table_path)
    if pie_path:
        render_pie(profile, pie_path)
    return table
