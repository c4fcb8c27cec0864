"""Synthetic two-level world with known child-level truth.

Generative process, in draw order (all from one seeded generator):

1. Hierarchy: ``n_countries`` x ``parents_per_country`` parents, each with
   ``children_per_parent`` children. Child land area ~ U[40k, 250k] ha;
   parent land area is the exact sum of its children.
2. Child base yield ``b_i ~ U[3, 9]`` t/ha; country trend slope
   ``g_c ~ U(trend_slope_range)`` t/ha per year.
3. Base area fraction ``f0_i`` in [0.05, 0.6], rising with ``b_i`` (crops
   are grown more where they yield more); per-year fraction follows a
   small clipped random walk around it.
4. Static features. ``sm_whc = b_i + N(0, 0.3^2)`` and
   ``irrigated_crop_share = f0_i + N(0, 0.02^2)`` are strongly informative.
   Each remaining continuous column is a unit-variance mix of the
   standardised base yield and noise with correlation ``+-U[0.3, 0.7]``
   (terrain and field structure co-vary with productivity).
5. Weather. Each (parent, year) gets C smooth unit-variance curves plus a
   fixed climatology; each child adds its own smooth perturbation (sd 0.5).
   The seasonal effect is ``<K, series>`` for a fixed kernel ``K``
   supported on the middle of the season, standardised over all
   child-years to sd 0.8 and multiplied by ``weather_effect_scale``.
6. Shocks. With probability ``shock_year_prob`` a (parent, year) loses
   1.5 t/ha in every child, and channel 0 of its weather dips by 2 units
   over steps [0.4T, 0.7T) so the shock is visible in the inputs.
7. Truth yield ``y = b_i + g_c (year - start_year) + e + shock + eps``,
   ``eps ~ N(0, noise_sd^2)``, clipped below at 0.1. Child crop area is
   fraction x land area; parent labels are the area sum and the
   area-weighted mean yield.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .config import config_hash, read_flat_config
from .dataio import FILES, Dataset
from .errors import InvalidConfigError, IoError
from .hierarchy import Level, Region, RegionHierarchy

CHANNELS_11 = ["wlim_yb", "wlim_ys", "wlai", "rsm", "twc", "tmax", "tmin", "tavg", "prec", "et0", "fapar"]
STATIC_NAMES = [
    "sm_whc", "irrigated_crop_share", "elev_mean", "elev_sd", "slope_mean", "slope_sd",
    "field_size_mean", "field_size_sd", "irrigated_total_share",
]

SHOCK_YIELD = -1.5
WEATHER_SD = 0.8


@dataclass(frozen=True)
class SynthConfig:
    n_countries: int = 2
    parents_per_country: int = 5
    children_per_parent: int = 6
    n_years: int = 20
    start_year: int = 1999
    T: int = 36
    C: int = 11
    S: int = 16
    n_zones: int = 3
    trend_slope_range: tuple[float, float] = (0.0, 0.08)
    weather_effect_scale: float = 1.0
    noise_sd: float = 0.25
    shock_year_prob: float = 0.1
    seed: int = 0

    def __post_init__(self):
        for name in ("n_countries", "parents_per_country", "children_per_parent", "n_years", "T", "C", "n_zones"):
            if int(getattr(self, name)) < 1:
                raise InvalidConfigError(f"{name} must be >= 1")
        if self.noise_sd < 0:
            raise InvalidConfigError("noise_sd must be >= 0")
        if not 0 <= self.shock_year_prob <= 1:
            raise InvalidConfigError("shock_year_prob must lie in [0, 1]")
        lo, hi = self.trend_slope_range
        if lo > hi:
            raise InvalidConfigError("trend_slope_range must be (low, high) with low <= high")
        if self.S - self.n_countries - self.n_zones < 2:
            raise InvalidConfigError("S must leave room for >= 2 continuous static features after one-hots")
        if self.T < 4:
            raise InvalidConfigError("T must be >= 4")

    @classmethod
    def from_dict(cls, values: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise InvalidConfigError(f"unknown synth config keys: {unknown}")
        values = dict(values)
        if "trend_slope_range" in values:
            values["trend_slope_range"] = tuple(float(v) for v in values["trend_slope_range"])
        try:
            return cls(**values)
        except TypeError as exc:
            raise InvalidConfigError(str(exc)) from None

    @classmethod
    def from_file(cls, path) -> "SynthConfig":
        return cls.from_dict(read_flat_config(path))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["trend_slope_range"] = list(self.trend_slope_range)
        return d


@dataclass
class SynthWorld:
    config: SynthConfig
    hierarchy: RegionHierarchy
    dataset: Dataset
    base_yield: np.ndarray  # (children,)
    trend_slope: dict[str, float]
    shocks: np.ndarray  # (parents, years) bool

    @property
    def truth(self) -> np.ndarray:
        """(children, years, 2): truth yield t/ha and area fraction."""
        return self.dataset.truth


def _ids(prefix: str, n: int) -> list[str]:
    width = max(1, len(str(n)))
    return [f"{prefix}{k:0{width}d}" for k in range(1, n + 1)]


def _smooth_noise(rng: np.random.Generator, shape, T: int, width: float = 3.0) -> np.ndarray:
    """Gaussian-smoothed white noise along the last axis, rescaled to unit sd."""
    raw = rng.normal(size=tuple(shape) + (T + 12,))
    k = np.arange(-6, 7)
    kern = np.exp(-0.5 * (k / width) ** 2)
    kern /= kern.sum()
    sm = np.apply_along_axis(lambda v: np.convolve(v, kern, mode="valid"), -1, raw)[..., :T]
    sd = sm.std(axis=-1, keepdims=True)
    return sm / np.where(sd > 0, sd, 1.0)


def generate_world(config: SynthConfig | None = None) -> SynthWorld:
    cfg = config or SynthConfig()
    rng = np.random.default_rng(cfg.seed)
    T, C = cfg.T, cfg.C
    years = list(range(cfg.start_year, cfg.start_year + cfg.n_years))
    ny = len(years)

    # 1. hierarchy
    h = RegionHierarchy()
    countries = _ids("C", cfg.n_countries)
    zones = _ids("Z", cfg.n_zones)
    parent_ids, child_ids, child_country = [], [], []
    child_land, child_zone = [], []
    for country in countries:
        for p in _ids(f"{country}P", cfg.parents_per_country):
            kids = _ids(f"{p}S", cfg.children_per_parent)
            parent_ids.append(p)
            for kid in kids:
                child_ids.append(kid)
                child_country.append(country)
                child_land.append(float(rng.uniform(40_000.0, 250_000.0)))
                child_zone.append(zones[int(rng.integers(cfg.n_zones))])
    npar, nch = len(parent_ids), len(child_ids)
    kpp = cfg.children_per_parent
    for pi, p in enumerate(parent_ids):
        sl = slice(pi * kpp, (pi + 1) * kpp)
        zs = child_zone[sl]
        h.add_region(Region(p, Level.PARENT, None, child_country[pi * kpp], max(sorted(set(zs)), key=zs.count),
                            float(sum(child_land[sl]))))
    for i, c in enumerate(child_ids):
        h.add_region(Region(c, Level.CHILD, parent_ids[i // kpp], child_country[i], child_zone[i], child_land[i]))
    land = np.array(child_land)
    parent_of = np.repeat(np.arange(npar), kpp)

    # 2. base yields and trend slopes
    base = rng.uniform(3.0, 9.0, size=nch)
    slopes = {c: float(rng.uniform(*cfg.trend_slope_range)) for c in countries}
    slope_child = np.array([slopes[c] for c in child_country])

    # 3. area fractions
    f0 = 0.05 + 0.55 * np.clip(0.6 * (base - 3.0) / 6.0 + 0.4 * rng.uniform(size=nch), 0.0, 1.0)
    walk = np.cumsum(rng.normal(0.0, 0.01, size=(nch, ny)), axis=1)
    frac = np.clip(f0[:, None] + walk, 0.05, 0.6)

    # 4. static features
    n_cont = cfg.S - cfg.n_countries - cfg.n_zones
    names = STATIC_NAMES[:n_cont] + [f"static_{k}" for k in range(len(STATIC_NAMES), n_cont)]
    zb = (base - 6.0) / np.sqrt(3.0)  # base yield on a unit-variance scale
    rho = rng.choice([-1.0, 1.0], size=n_cont) * rng.uniform(0.3, 0.7, size=n_cont)
    static = rho * zb[:, None] + np.sqrt(1.0 - rho**2) * rng.normal(size=(nch, n_cont))
    static[:, 0] = base + rng.normal(0.0, 0.3, size=nch)
    static[:, 1] = f0 + rng.normal(0.0, 0.02, size=nch)

    # 5. weather
    climatology = rng.uniform(0.5, 2.0, size=C)[:, None] * np.sin(np.pi * (np.arange(T) + 0.5) / T)[None, :]
    parent_curves = _smooth_noise(rng, (npar, ny, C), T)
    child_pert = 0.5 * _smooth_noise(rng, (nch, ny, C), T)
    series = climatology[None, None] + parent_curves[parent_of] + child_pert  # (nch, ny, C, T)
    support = np.zeros(T)
    lo, hi = int(0.3 * T), max(int(0.8 * T), int(0.3 * T) + 1)
    support[lo:hi] = np.sin(np.pi * (np.arange(hi - lo) + 0.5) / (hi - lo))
    kernel = rng.normal(size=C)[:, None] * support[None, :]
    raw = np.einsum("iyct,ct->iy", series, kernel)
    sd = raw.std()
    effect = cfg.weather_effect_scale * WEATHER_SD * (raw - raw.mean()) / (sd if sd > 0 else 1.0)
    if cfg.weather_effect_scale == 0:
        effect = np.zeros_like(raw)

    # 6. shocks
    shocks = rng.uniform(size=(npar, ny)) < cfg.shock_year_prob
    s_lo, s_hi = int(0.4 * T), max(int(0.7 * T), int(0.4 * T) + 1)
    shocked = shocks[parent_of]  # (nch, ny)
    series[:, :, 0, s_lo:s_hi] -= 2.0 * shocked[:, :, None]

    # 7. truth and labels
    t_idx = np.arange(ny)[None, :]
    eps = rng.normal(0.0, 1.0, size=(nch, ny)) * cfg.noise_sd
    yld = base[:, None] + slope_child[:, None] * t_idx + effect + SHOCK_YIELD * shocked + eps
    yld = np.maximum(yld, 0.1)
    area = frac * land[:, None]
    labels = np.zeros((npar, ny, 2))
    for pi in range(npar):
        sl = slice(pi * kpp, (pi + 1) * kpp)
        a = area[sl]
        labels[pi, :, 1] = a.sum(axis=0)
        labels[pi, :, 0] = (a * yld[sl]).sum(axis=0) / labels[pi, :, 1]

    channel_names = CHANNELS_11 if C == 11 else [f"ch{k}" for k in range(C)]
    oh_names = [f"country={c}" for c in countries] + [f"zone={z}" for z in sorted(set(child_zone))]
    onehot = np.zeros((nch, len(oh_names)))
    used_zones = sorted(set(child_zone))
    for i in range(nch):
        onehot[i, countries.index(child_country[i])] = 1.0
        onehot[i, len(countries) + used_zones.index(child_zone[i])] = 1.0

    ds = Dataset(
        child_ids=child_ids,
        parent_ids=parent_ids,
        years=years,
        channel_names=list(channel_names),
        seasonal=np.ascontiguousarray(series.transpose(0, 1, 3, 2)),
        has_series=np.ones((nch, ny), dtype=bool),
        static_names=names + oh_names,
        static=np.concatenate([static, onehot], axis=1),
        onehot=np.array([False] * n_cont + [True] * len(oh_names)),
        labels=labels,
        truth=np.stack([yld, frac], axis=-1),
    )
    return SynthWorld(cfg, h, ds, base, slopes, shocks)


def header_lines(config: SynthConfig, version: str) -> list[str]:
    return [f"cropdisagg {version} seed={config.seed} config={config_hash(config.to_dict())}"]


def export_world(world: SynthWorld, out_dir, header: list[str] | None = None) -> list[Path]:
    """Write the world in the on-disk data layout (see :mod:`cropdisagg.dataio`)."""
    from . import __version__

    header = header if header is not None else header_lines(world.config, __version__)
    out = Path(out_dir)
    ds = world.dataset
    written = []
    try:
        out.mkdir(parents=True, exist_ok=True)

        def open_csv(role, columns):
            path = out / FILES[role]
            fh = open(path, "w", newline="", encoding="utf-8")
            for line in header:
                fh.write(f"# {line}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(columns)
            written.append(path)
            return fh, w

        path = out / FILES["regions"]
        world.hierarchy.to_csv(path, header)
        written.append(path)

        fh, w = open_csv("seasonal", ["region_id", "year", "t", "channel", "value"])
        with fh:
            for i, cid in enumerate(ds.child_ids):
                for j, year in enumerate(ds.years):
                    block = ds.seasonal[i, j]
                    for t in range(ds.T):
                        for c, name in enumerate(ds.channel_names):
                            w.writerow((cid, year, t, name, repr(float(block[t, c]))))

        n_cont = int((~ds.onehot).sum())
        fh, w = open_csv("static", ["region_id", "feature", "value"])
        with fh:
            for i, cid in enumerate(ds.child_ids):
                for k in range(n_cont):
                    w.writerow((cid, ds.static_names[k], repr(float(ds.static[i, k]))))

        fh, w = open_csv("labels", ["parent_id", "year", "yield_t_ha", "crop_area_ha"])
        with fh:
            for p, pid in enumerate(ds.parent_ids):
                for j, year in enumerate(ds.years):
                    w.writerow((pid, year, repr(float(ds.labels[p, j, 0])), repr(float(ds.labels[p, j, 1]))))

        fh, w = open_csv("truth", ["region_id", "year", "yield_t_ha", "area_fraction"])
        with fh:
            for i, cid in enumerate(ds.child_ids):
                for j, year in enumerate(ds.years):
                    w.writerow((cid, year, repr(float(ds.truth[i, j, 0])), repr(float(ds.truth[i, j, 1]))))
    except OSError as exc:
        raise IoError(f"cannot write synthetic world to {out}: {exc}") from None
    return written


def aggregation_gap(world: SynthWorld) -> float:
    """Largest violation of the parent-label aggregation identity."""
    ds = world.dataset
    worst = 0.0
    for p, pid in enumerate(ds.parent_ids):
        kids = [ds.child_ids.index(k) for k in world.hierarchy.children_of(pid)]
        land = np.array([world.hierarchy[k].land_area for k in world.hierarchy.children_of(pid)])
        area = ds.truth[kids, :, 1] * land[:, None]
        tot = area.sum(axis=0)
        yld = (area * ds.truth[kids, :, 0]).sum(axis=0) / tot
        worst = max(worst, float(np.max(np.abs(yld - ds.labels[p, :, 0]))),
                    float(np.max(np.abs(tot - ds.labels[p, :, 1]) / np.maximum(tot, 1.0))))
    return worst


def nominal_slope_recovery(world: SynthWorld) -> float:
    """Worst |OLS slope of child truth on year - country slope| over children."""
    ds = world.dataset
    x = np.arange(len(ds.years), dtype=float)
    xc = x - x.mean()
    worst = 0.0
    for i, cid in enumerate(ds.child_ids):
        y = ds.truth[i, :, 0]
        slope = float(xc @ (y - y.mean()) / (xc @ xc))
        worst = max(worst, abs(slope - world.trend_slope[world.hierarchy[cid].country]))
    return worst

