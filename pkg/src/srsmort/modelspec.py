"""Declarative model description and its realized sparse design.

The linear predictor of cell ``(r, a, t, c)`` is an intercept, reference-coded
main effects and two-way interactions over region/age/cause, a temporal walk
``gamma[r, a*, c*](t)`` shared within age and cause groups, and an optional
overdispersion effect.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

FACTOR_DIMS = ("region", "age", "cause")
_DIM_AXIS = {"region": 0, "age": 1, "year": 2, "cause": 3}
WALK_STRUCTURES = ("rw1", "rw2", "ar1")
OVERDISPERSION = ("none", "iid", "bivariate")

# a* groups the 0-6 day age group apart from the rest; c* pools
# (diarrhea, other communicable) and (congenital, other NCD)
MCHSS_AGE_GROUPS = (0, 1, 1, 1, 1, 1)
MCHSS_CAUSE_GROUPS = (0, 0, 1, 1, 2, 3, 4, 5)
MCHSS_FIXED_TERMS = ("intercept", "region", "age", "cause", "age:cause", "region:cause", "age:region")

CONFIG_DIR = Path(__file__).with_name("configs")


class SpecError(ValueError):
    """Invalid model specification for the given data dimensions."""


def pc_prior_rate(U: float, alpha: float) -> float:
    """Exponential rate on a standard deviation with ``P(sigma > U) = alpha``."""
    if not U > 0:
        raise ValueError(f"PC prior threshold must be positive, got {U}")
    if not 0 < alpha < 1:
        raise ValueError(f"PC prior tail probability must lie in (0, 1), got {alpha}")
    return -math.log(alpha) / U


@dataclass(frozen=True)
class VariancePrior:
    """Prior on one variance parameter.

    ``kind="pc"`` puts an exponential prior on the standard deviation with
    ``P(sigma > u) = alpha``; ``kind="gamma"`` puts Gamma(shape, rate) on the
    precision.
    """

    kind: str = "pc"
    u: float = 1.0
    alpha: float = 0.01
    shape: float = 5.0
    rate: float = 0.00005

    def __post_init__(self):
        if self.kind == "pc":
            pc_prior_rate(self.u, self.alpha)
        elif self.kind == "gamma":
            if not (self.shape > 0 and self.rate > 0):
                raise SpecError("gamma prior needs positive shape and rate")
        else:
            raise SpecError(f"unknown variance prior kind {self.kind!r}")


@dataclass(frozen=True)
class WalkSpec:
    """Temporal random walks grouped over region, age group a* and cause group c*.

    ``age_groups[a]`` and ``cause_groups[c]`` give a* and c*; ``None`` means
    identity. ``by`` lists the dimensions crossed to form walks.
    ``variance_by`` gives a separate walk variance per level combination of
    the listed dimensions (empty: one shared variance).
    """

    structure: str = "rw2"
    by: tuple[str, ...] = FACTOR_DIMS
    age_groups: tuple[int, ...] | None = MCHSS_AGE_GROUPS
    cause_groups: tuple[int, ...] | None = MCHSS_CAUSE_GROUPS
    ar1_phi: float = 0.9
    variance_by: tuple[str, ...] = ()

    def __post_init__(self):
        if self.structure not in WALK_STRUCTURES:
            raise SpecError(f"walk structure must be one of {WALK_STRUCTURES}, got {self.structure!r}")
        for d in self.by:
            if d not in FACTOR_DIMS:
                raise SpecError(f"walks can only be crossed over {FACTOR_DIMS}, got {d!r}")
        for d in self.variance_by:
            if d not in self.by:
                raise SpecError(f"variance_by dimension {d!r} is not one of the walk dimensions {self.by}")
        for name in ("age_groups", "cause_groups"):
            g = getattr(self, name)
            if g is not None:
                g = tuple(int(v) for v in g)
                if min(g) < 0:
                    raise SpecError(f"{name} must be non-negative group indices")
                object.__setattr__(self, name, g)


@dataclass(frozen=True)
class ModelSpec:
    fixed_terms: tuple[str, ...] = MCHSS_FIXED_TERMS
    walks: WalkSpec | None = field(default_factory=WalkSpec)
    overdispersion: str = "iid"
    walk_prior: VariancePrior = field(default_factory=lambda: VariancePrior("pc", 1.0, 0.01))
    epsilon_prior: VariancePrior = field(default_factory=lambda: VariancePrior("pc", 5.0, 0.01))
    correlation_prior: str = "uniform"
    intercept_prior: str = "diffuse"
    intercept_variance: float = 1e6
    fixed_variance: float = 1e3

    def __post_init__(self):
        terms = tuple(self.fixed_terms)
        object.__setattr__(self, "fixed_terms", terms)
        if len(set(terms)) != len(terms):
            raise SpecError("duplicate fixed terms")
        for t in terms:
            if t == "intercept":
                continue
            parts = t.split(":")
            if len(parts) > 2 or any(p not in FACTOR_DIMS for p in parts) or len(set(parts)) != len(parts):
                raise SpecError(f"unknown fixed term {t!r}")
        if self.overdispersion not in OVERDISPERSION:
            raise SpecError(f"overdispersion must be one of {OVERDISPERSION}")
        if self.intercept_prior not in ("diffuse", "flat"):
            raise SpecError("intercept_prior must be 'diffuse' or 'flat'")
        if self.correlation_prior != "uniform":
            raise SpecError("only a uniform correlation prior is supported")
        if not (self.intercept_variance > 0 and self.fixed_variance > 0):
            raise SpecError("fixed-effect prior variances must be positive")

    def validate(self, dims) -> None:
        R, A, T, C = dims
        sizes = {"region": R, "age": A, "cause": C}
        for t in self.fixed_terms:
            for p in t.split(":"):
                if p != "intercept" and sizes[p] < 1:
                    raise SpecError(f"term {t!r} uses absent dimension {p}")
        if self.overdispersion == "bivariate" and C != 2:
            raise SpecError(f"bivariate overdispersion needs exactly 2 causes, got {C}")
        w = self.walks
        if w is not None:
            if w.age_groups is not None and len(w.age_groups) != A:
                raise SpecError(f"age_groups has {len(w.age_groups)} entries for {A} age groups")
            if w.cause_groups is not None and len(w.cause_groups) != C:
                raise SpecError(f"cause_groups has {len(w.cause_groups)} entries for {C} causes")
            min_t = {"rw2": 3, "rw1": 2, "ar1": 1}[w.structure]
            if T < min_t:
                raise SpecError(f"{w.structure} walks need at least {min_t} years, got {T}")

    def with_gamma_priors(self, shape: float = 5.0, rate: float = 0.00005) -> "ModelSpec":
        g = VariancePrior("gamma", shape=shape, rate=rate)
        return replace(self, walk_prior=g, epsilon_prior=g)

    def with_strong_fixed_priors(self, variance: float = 5.0) -> "ModelSpec":
        return replace(self, fixed_variance=variance)

    def without_interactions(self) -> "ModelSpec":
        return replace(self, fixed_terms=tuple(t for t in self.fixed_terms if ":" not in t))


def rw_group_index(a: int, c: int, age_groups: Sequence[int] | None = MCHSS_AGE_GROUPS,
                   cause_groups: Sequence[int] | None = MCHSS_CAUSE_GROUPS) -> tuple[int, int]:
    """Walk group ``(a*, c*)`` of age index ``a`` and cause index ``c`` (0-based).

    ``None`` for either map means identity.
    """
    if a < 0 or (age_groups is not None and a >= len(age_groups)):
        raise IndexError(f"age index {a} out of range")
    if c < 0 or (cause_groups is not None and c >= len(cause_groups)):
        raise IndexError(f"cause index {c} out of range")
    a_star = a if age_groups is None else int(age_groups[a])
    c_star = c if cause_groups is None else int(cause_groups[c])
    return a_star, c_star


@dataclass(frozen=True, eq=False)
class DesignRealization:
    """Sparse design and latent layout for one data grid.

    :ivar design: (n_observed x n_latent) CSR matrix, rows in ``observed_cells`` order.
    :ivar full_design: (n_cells x n_latent) for every grid cell; overdispersion
        columns appear only on cells that carry an overdispersion coefficient.
    :ivar epsilon_column: per grid cell, its overdispersion column or -1.
    :ivar latent_index: ordered mapping of term name to latent slice.
    :ivar constraints: one sum-to-zero row per walk.
    :ivar cell_walk: per grid cell, the index of its walk.
    """

    dims: tuple[int, int, int, int]
    design: sp.csr_matrix
    full_design: sp.csr_matrix
    observed_cells: np.ndarray
    epsilon_column: np.ndarray
    latent_index: "OrderedDict[str, slice]"
    constraints: sp.csr_matrix
    walk_keys: tuple[tuple[int, ...], ...] = ()
    walk_length: int = 0
    walk_variance_group: np.ndarray | None = None
    unmapped_walks: tuple[int, ...] = ()
    epsilon_strata: np.ndarray | None = None
    cell_walk: np.ndarray | None = None

    @property
    def n_latent(self) -> int:
        return self.design.shape[1]

    @property
    def n_walks(self) -> int:
        return len(self.walk_keys)

    @property
    def n_fixed(self) -> int:
        return sum(s.stop - s.start for k, s in self.latent_index.items() if k not in ("walks", "epsilon"))

    def fixed_names(self) -> list[str]:
        return [k for k in self.latent_index if k not in ("walks", "epsilon")]

    def design_without_epsilon(self) -> sp.csr_matrix:
        """Full-grid design with overdispersion columns removed (zeroed)."""
        sl = self.latent_index.get("epsilon")
        if sl is None:
            return self.full_design
        keep = np.ones(self.n_latent)
        keep[sl] = 0.0
        return (self.full_design @ sp.diags(keep)).tocsr()


def _cell_grid(dims):
    R, A, T, C = dims
    return [g.ravel() for g in np.meshgrid(np.arange(R), np.arange(A), np.arange(T), np.arange(C), indexing="ij")]


def build_design(spec: ModelSpec, dims, observed=None) -> DesignRealization:
    """Realize ``spec`` on a grid of shape ``dims = (R, A, T, C)``.

    ``observed`` is an optional boolean (R, A, T, C) array selecting the cells
    that form the likelihood rows; by default every cell is observed.
    """
    dims = tuple(int(d) for d in dims)
    if len(dims) != 4 or min(dims) < 1:
        raise SpecError(f"dims must be four positive integers, got {dims}")
    spec.validate(dims)
    R, A, T, C = dims
    n_cells = R * A * T * C
    if observed is None:
        observed = np.ones(dims, bool)
    observed = np.asarray(observed, bool)
    if observed.shape != dims:
        raise SpecError(f"observed mask shape {observed.shape} does not match dims {dims}")
    obs_flat = observed.ravel()
    levels = dict(zip(("region", "age", "year", "cause"), _cell_grid(dims)))
    sizes = {"region": R, "age": A, "cause": C}

    rows, cols = [], []
    latent_index: OrderedDict[str, slice] = OrderedDict()
    offset = 0
    all_cells = np.arange(n_cells)

    for term in spec.fixed_terms:
        if term == "intercept":
            rows.append(all_cells)
            cols.append(np.zeros(n_cells, dtype=np.int64))
            width = 1
        else:
            parts = term.split(":")
            if len(parts) == 1:
                lv = levels[parts[0]]
                keep = lv > 0
                rows.append(all_cells[keep])
                cols.append(offset + lv[keep] - 1)
                width = sizes[parts[0]] - 1
            else:
                u, v = parts
                lu, lv = levels[u], levels[v]
                keep = (lu > 0) & (lv > 0)
                rows.append(all_cells[keep])
                cols.append(offset + (lu[keep] - 1) * (sizes[v] - 1) + (lv[keep] - 1))
                width = (sizes[u] - 1) * (sizes[v] - 1)
        latent_index[term] = slice(offset, offset + width)
        offset += width

    walk_keys: tuple = ()
    unmapped: tuple = ()
    constraints = sp.csr_matrix((0, 0))
    n_walks = 0
    var_group = None
    walk_id = None
    if spec.walks is not None:
        w = spec.walks
        a_star = levels["age"] if w.age_groups is None else np.asarray(w.age_groups)[levels["age"]]
        c_star = levels["cause"] if w.cause_groups is None else np.asarray(w.cause_groups)[levels["cause"]]
        grouped = {"region": levels["region"], "age": a_star, "cause": c_star}
        # walks indexed by the distinct level combinations that occur on the grid
        if w.by:
            key_cols = np.stack([grouped[d] for d in w.by], axis=1)
            uniq, walk_id = np.unique(key_cols, axis=0, return_inverse=True)
            walk_id = walk_id.ravel()
        else:
            uniq, walk_id = np.zeros((1, 0), int), np.zeros(n_cells, int)
        n_walks = len(uniq)
        walk_keys = tuple(tuple(int(v) for v in row) for row in uniq)
        rows.append(all_cells)
        cols.append(offset + walk_id * T + levels["year"])
        latent_index["walks"] = slice(offset, offset + n_walks * T)
        seen = np.zeros(n_walks, bool)
        seen[walk_id[obs_flat]] = True
        unmapped = tuple(int(i) for i in np.flatnonzero(~seen))
        crow = np.repeat(np.arange(n_walks), T)
        ccol = offset + np.arange(n_walks * T)
        walk_offset = offset
        offset += n_walks * T
        if w.variance_by:
            idx = [w.by.index(d) for d in w.variance_by]
            _, var_group = np.unique(uniq[:, idx], axis=0, return_inverse=True)
            var_group = var_group.ravel()
        else:
            var_group = np.zeros(n_walks, dtype=np.int64)

    eps_col = np.full(n_cells, -1, dtype=np.int64)
    eps_strata = None
    if spec.overdispersion == "iid":
        obs_idx = np.flatnonzero(obs_flat)
        eps_col[obs_idx] = offset + np.arange(len(obs_idx))
        latent_index["epsilon"] = slice(offset, offset + len(obs_idx))
        offset += len(obs_idx)
    elif spec.overdispersion == "bivariate":
        strata_obs = observed.reshape(R * A * T, C).any(axis=1)
        eps_strata = np.flatnonzero(strata_obs)
        pos = np.full(R * A * T, -1)
        pos[eps_strata] = np.arange(len(eps_strata))
        stratum = all_cells // C
        has = pos[stratum] >= 0
        eps_col[has] = offset + 2 * pos[stratum[has]] + levels["cause"][has]
        latent_index["epsilon"] = slice(offset, offset + 2 * len(eps_strata))
        offset += 2 * len(eps_strata)
    has_eps = eps_col >= 0
    rows.append(all_cells[has_eps])
    cols.append(eps_col[has_eps])

    n_latent = offset
    r = np.concatenate(rows) if rows else np.zeros(0, int)
    c = np.concatenate(cols) if cols else np.zeros(0, int)
    full = sp.csr_matrix((np.ones(len(r)), (r, c)), shape=(n_cells, n_latent))
    full.sum_duplicates()
    obs_cells = np.flatnonzero(obs_flat)
    if n_walks:
        constraints = sp.csr_matrix((np.ones(len(crow)), (crow, ccol)), shape=(n_walks, n_latent))
    else:
        constraints = sp.csr_matrix((0, n_latent))
    return DesignRealization(
        dims=dims,
        design=full[obs_cells].tocsr(),
        full_design=full,
        observed_cells=obs_cells,
        epsilon_column=eps_col,
        latent_index=latent_index,
        constraints=constraints,
        walk_keys=walk_keys,
        walk_length=T if n_walks else 0,
        walk_variance_group=var_group,
        unmapped_walks=unmapped,
        epsilon_strata=eps_strata,
        cell_walk=walk_id,
    )


# ---------------------------------------------------------------- config files

def _prior_from_dict(d: dict, default: VariancePrior) -> VariancePrior:
    if not d:
        return default
    return VariancePrior(
        kind=d.get("kind", default.kind),
        u=float(d.get("u", default.u)),
        alpha=float(d.get("alpha", default.alpha)),
        shape=float(d.get("shape", default.shape)),
        rate=float(d.get("rate", default.rate)),
    )


def spec_from_dict(cfg: dict) -> ModelSpec:
    """Build a :class:`ModelSpec` from the nested mapping of a TOML config."""
    base = ModelSpec()
    model = cfg.get("model", {})
    priors = cfg.get("priors", {})
    walks_cfg = cfg.get("walks")
    walks = None
    if walks_cfg is not None and walks_cfg.get("enabled", True):
        walks = WalkSpec(
            structure=walks_cfg.get("structure", "rw2"),
            by=tuple(walks_cfg.get("by", FACTOR_DIMS)),
            age_groups=_optional_groups(walks_cfg.get("age_groups", list(MCHSS_AGE_GROUPS))),
            cause_groups=_optional_groups(walks_cfg.get("cause_groups", list(MCHSS_CAUSE_GROUPS))),
            ar1_phi=float(walks_cfg.get("ar1_phi", 0.9)),
            variance_by=tuple(walks_cfg.get("variance_by", ())),
        )
    fixed = priors.get("fixed", {})
    try:
        return ModelSpec(
            fixed_terms=tuple(model.get("fixed_terms", base.fixed_terms)),
            walks=walks,
            overdispersion=model.get("overdispersion", base.overdispersion),
            walk_prior=_prior_from_dict(priors.get("walk", {}), base.walk_prior),
            epsilon_prior=_prior_from_dict(priors.get("epsilon", {}), base.epsilon_prior),
            correlation_prior=priors.get("correlation", base.correlation_prior),
            intercept_prior=fixed.get("intercept", base.intercept_prior),
            intercept_variance=float(fixed.get("intercept_variance", base.intercept_variance)),
            fixed_variance=float(fixed.get("variance", base.fixed_variance)),
        )
    except TypeError as exc:
        raise SpecError(str(exc)) from None


def _optional_groups(v):
    if v is None or v == "identity":
        return None
    return tuple(int(x) for x in v)


def load_spec(path) -> ModelSpec:
    """Read a model spec from a TOML file."""
    with Path(path).open("rb") as fh:
        try:
            cfg = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise SpecError(f"{path}: {exc}") from None
    return spec_from_dict(cfg)


def default_spec() -> ModelSpec:
    """The bundled MCHSS model spec."""
    return load_spec(CONFIG_DIR / "mchss.toml")


def _toml_value(v) -> str:
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def spec_to_toml(spec: ModelSpec) -> str:
    """Serialize ``spec`` in the format read by :func:`load_spec`."""
    out = ["[model]",
           f"fixed_terms = {_toml_value(spec.fixed_terms)}",
           f"overdispersion = {_toml_value(spec.overdispersion)}", ""]
    if spec.walks is not None:
        w = spec.walks
        out += ["[walks]",
                f"structure = {_toml_value(w.structure)}",
                f"by = {_toml_value(w.by)}",
                f"age_groups = {_toml_value(w.age_groups if w.age_groups is not None else 'identity')}",
                f"cause_groups = {_toml_value(w.cause_groups if w.cause_groups is not None else 'identity')}",
                f"ar1_phi = {_toml_value(float(w.ar1_phi))}",
                f"variance_by = {_toml_value(w.variance_by)}", ""]
    for name, p in (("walk", spec.walk_prior), ("epsilon", spec.epsilon_prior)):
        out.append(f"[priors.{name}]")
        out.append(f"kind = {_toml_value(p.kind)}")
        # both parameter pairs are written so a ModelSpec round-trips exactly
        out += [f"u = {_toml_value(float(p.u))}", f"alpha = {_toml_value(float(p.alpha))}",
                f"shape = {_toml_value(float(p.shape))}", f"rate = {_toml_value(float(p.rate))}"]
        out.append("")
    out += ["[priors.fixed]",
            f"intercept = {_toml_value(spec.intercept_prior)}",
            f"intercept_variance = {_toml_value(float(spec.intercept_variance))}",
            f"variance = {_toml_value(float(spec.fixed_variance))}", ""]
    return "\n".join(out)
