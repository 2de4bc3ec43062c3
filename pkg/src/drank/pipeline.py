"""Whole-model orchestration: plan, compress, verify, bench.

A model is described by a manifest (layer count, per-role dims, attention
kind, tensor name patterns). Planning forms layer groups per role, measures
group effective ranks on the whitened concatenations, allocates ranks per
matrix type under the type's parameter budget, rebalances Q/K toward V, and
integerizes. Compression emits a ``.dst`` store of shared bases and
coefficient blocks; verification recomputes every error from the stored
bytes.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import allocator, compressor, effective_rank, rebalance, tensor_store, whitening

ROLES = ("Q", "K", "V", "O", "up", "gate", "down")
GROUPABLE_ROLES = frozenset({"Q", "K", "V", "up", "gate"})
STORE_DTYPES = {"f32": np.float32, "f64": np.float64}

GRAM_NAME = "gram/{layer}/{role}"
SAMPLES_KEY = "samples/{layer}/{role}"
BASIS_NAME = "B/{role}/{group}"
COEFF_NAME = "C/{role}/{layer}"

HIGH_RATIO_WARNING = (
    "removal ratio >= 0.4: accumulated reconstruction error typically shifts "
    "downstream layer inputs enough to need sequential weight updates, which "
    "this tool does not perform"
)


class PolicyError(ValueError):
    """Manifest/configuration combination the grouping policy rejects."""


class VerificationError(ValueError):
    """Compressed store inconsistent with the manifest or plan."""


@dataclass(frozen=True)
class RoleSpec:
    d_in: int
    d_out: int
    pattern: str  # e.g. "w/{layer}/Q"

    def tensor_name(self, layer: int) -> str:
        return self.pattern.format(layer=layer)


@dataclass(frozen=True)
class ModelManifest:
    layers: int
    attention_kind: str  # "MHA" | "GQA"
    roles: dict[str, RoleSpec]
    group_size: int | None = None  # requested n for groupable roles

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("manifest needs at least one layer")
        if self.attention_kind not in ("MHA", "GQA"):
            raise ValueError(f"unknown attention kind {self.attention_kind!r}")
        unknown = set(self.roles) - set(ROLES)
        if unknown:
            raise ValueError(f"unknown roles in manifest: {sorted(unknown)}")

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelManifest":
        roles = {
            name: RoleSpec(
                d_in=int(spec["d_in"]),
                d_out=int(spec["d_out"]),
                pattern=spec.get("pattern", "w/{layer}/" + name),
            )
            for name, spec in d["roles"].items()
        }
        return cls(
            layers=int(d["layers"]),
            attention_kind=d["attention_kind"],
            roles=roles,
            group_size=d.get("group_size"),
        )

    def to_dict(self) -> dict:
        return {
            "layers": self.layers,
            "attention_kind": self.attention_kind,
            "roles": {name: asdict(spec) for name, spec in self.roles.items()},
            **({"group_size": self.group_size} if self.group_size is not None else {}),
        }

    @classmethod
    def load(cls, path: str | Path) -> "ModelManifest":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def role_order(self) -> list[str]:
        return [r for r in ROLES if r in self.roles]


def resolve_group_sizes(manifest: ModelManifest, group_size: int | None) -> dict[str, int]:
    """Per-role group sizes under the grouping policy.

    down and O are never grouped; grouped-query attention forces n=1 for every
    role (explicitly requesting n>1 on a GQA manifest is an error, defaulting
    is not).
    """
    requested = group_size if group_size is not None else manifest.group_size
    if requested is None:
        n = 2 if manifest.attention_kind == "MHA" else 1
    else:
        n = int(requested)
        if n < 1:
            raise PolicyError(f"group size must be >= 1, got {n}")
        if manifest.attention_kind == "GQA" and n > 1:
            raise PolicyError(
                f"group size {n} rejected: grouped-query attention narrows the K/V "
                "projections, so cross-layer concatenation inflates per-matrix "
                "truncation error; GQA models are compressed with group size 1"
            )
    n = min(n, manifest.layers)
    return {role: (n if role in GROUPABLE_ROLES else 1) for role in manifest.role_order()}


def make_groups(layers: int, n: int) -> list[tuple[int, ...]]:
    """Consecutive chunks of n layers; a trailing remainder forms a smaller group."""
    return [tuple(range(i, min(i + n, layers))) for i in range(0, layers, n)]


# ---------------------------------------------------------------------------
# plan


@dataclass
class GroupPlan:
    role: str
    index: int
    members: list[int]
    d1: int
    d2: int
    n: int
    omega: int
    kmax: int
    effective_rank: float
    n_singular: int
    k_uniform: int
    k_real_raw: float
    k_real: float
    k_int: int = 0
    params: int = 0


@dataclass
class RolePlan:
    role: str
    original_params: int
    budget: float
    spent: int
    groups: list[GroupPlan]


@dataclass
class CompressionPlan:
    theta: float
    beta: float
    beta_effective: float
    attention_kind: str
    group_size: dict[str, int]
    pooled_budget: bool
    whitener: str  # "upper" | "lower"
    roles: dict[str, RolePlan]
    total_original: int
    total_budget: float
    total_spent: int
    warnings: list[str] = field(default_factory=list)

    @property
    def stored_ratio(self) -> float:
        return self.total_spent / self.total_original

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stored_ratio"] = self.stored_ratio
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping) -> "CompressionPlan":
        roles = {
            name: RolePlan(
                role=rp["role"],
                original_params=rp["original_params"],
                budget=rp["budget"],
                spent=rp["spent"],
                groups=[GroupPlan(**g) for g in rp["groups"]],
            )
            for name, rp in d["roles"].items()
        }
        return cls(
            theta=d["theta"],
            beta=d["beta"],
            beta_effective=d["beta_effective"],
            attention_kind=d["attention_kind"],
            group_size=dict(d["group_size"]),
            pooled_budget=d["pooled_budget"],
            whitener=d["whitener"],
            roles=roles,
            total_original=d["total_original"],
            total_budget=d["total_budget"],
            total_spent=d["total_spent"],
            warnings=list(d.get("warnings", [])),
        )

    @classmethod
    def from_json(cls, text: str) -> "CompressionPlan":
        return cls.from_dict(json.loads(text))


def _load_gram(gram: tensor_store.TensorStore, layer: int, role: str) -> whitening.GramStats:
    name = GRAM_NAME.format(layer=layer, role=role)
    if name not in gram:
        raise VerificationError(f"gram store is missing tensor {name!r}")
    skey = SAMPLES_KEY.format(layer=layer, role=role)
    if skey not in gram.metadata:
        raise VerificationError(f"gram store is missing metadata {skey!r}")
    return whitening.GramStats(
        role=role,
        layer=layer,
        G=np.asarray(gram.get(name), dtype=np.float64),
        samples=int(gram.metadata[skey]),
    )


def _load_weight(
    weights: tensor_store.TensorStore, manifest: ModelManifest, layer: int, role: str
) -> np.ndarray:
    spec = manifest.roles[role]
    name = spec.tensor_name(layer)
    if name not in weights:
        raise VerificationError(f"weight store is missing tensor {name!r}")
    W = np.asarray(weights.get(name), dtype=np.float64)
    if W.shape != (spec.d_in, spec.d_out):
        raise VerificationError(
            f"tensor {name!r} has shape {W.shape}, manifest says {(spec.d_in, spec.d_out)}"
        )
    return W


def _build_group(
    manifest: ModelManifest,
    weights: tensor_store.TensorStore,
    gram: tensor_store.TensorStore,
    role: str,
    members: Sequence[int],
    lower: bool,
) -> compressor.LayerGroup:
    stats = [_load_gram(gram, layer, role) for layer in members]
    return compressor.LayerGroup(
        role=role,
        members=tuple(members),
        W_list=tuple(_load_weight(weights, manifest, layer, role) for layer in members),
        whitener=whitening.build_group_whitener(stats, lower=lower),
    )


def plan(
    manifest: ModelManifest,
    weights: tensor_store.TensorStore,
    gram: tensor_store.TensorStore,
    theta: float,
    beta: float = 0.3,
    group_size: int | None = None,
    pooled_budget: bool = False,
    lower_cholesky: bool = False,
) -> CompressionPlan:
    """Measure effective ranks, allocate and rebalance ranks, integerize."""
    if not 0.0 < theta < 1.0:
        raise ValueError("theta must lie in (0, 1)")
    gsizes = resolve_group_sizes(manifest, group_size)
    order = manifest.role_order()

    role_groups: dict[str, list[GroupPlan]] = {}
    for role in order:
        spec = manifest.roles[role]
        d1, d2 = spec.d_in, spec.d_out
        groups = []
        for gi, members in enumerate(make_groups(manifest.layers, gsizes[role])):
            g = _build_group(manifest, weights, gram, role, members, lower_cholesky)
            scaled = whitening.scale(compressor.concat_group(g.W_list), g.whitener)
            er = effective_rank.group_effective_rank(scaled, group=gi, role=role)
            n_g = len(members)
            groups.append(
                GroupPlan(
                    role=role,
                    index=gi,
                    members=list(members),
                    d1=d1,
                    d2=d2,
                    n=n_g,
                    omega=d1 + n_g * d2,
                    kmax=min(d1, n_g * d2),
                    effective_rank=er.value,
                    n_singular=er.n_singular,
                    k_uniform=allocator.uniform_rank(d1, d2, n_g, theta),
                    k_real_raw=0.0,
                    k_real=0.0,
                )
            )
        role_groups[role] = groups

    role_budget = {
        role: manifest.layers * manifest.roles[role].d_in * manifest.roles[role].d_out * (1.0 - theta)
        for role in order
    }

    def problem(roles: Sequence[str], budget: float) -> allocator.AllocationProblem:
        gps = [gp for r in roles for gp in role_groups[r]]
        return allocator.AllocationProblem(
            reff=np.array([gp.effective_rank for gp in gps]),
            omega=np.array([gp.omega for gp in gps]),
            budget=budget,
            kmax=np.array([gp.kmax for gp in gps]),
        )

    # closed-form real allocation, per matrix type or pooled
    if pooled_budget:
        k_real_all = allocator.allocate_real(problem(order, sum(role_budget.values())))
        i = 0
        for role in order:
            for gp in role_groups[role]:
                gp.k_real_raw = gp.k_real = float(k_real_all[i])
                i += 1
    else:
        for role in order:
            for gp, kr in zip(role_groups[role], allocator.allocate_real(problem([role], role_budget[role]))):
                gp.k_real_raw = gp.k_real = float(kr)

    # beta rebalance across Q/K/V, on real values
    warnings: list[str] = []
    beta_effective = beta
    qkv = ("Q", "K", "V")
    if beta > 0 and not all(r in role_groups for r in qkv):
        warnings.append("beta ignored: manifest does not define all of Q, K, V")
    if beta > 0 and all(r in role_groups for r in qkv):
        counts = {len(role_groups[r]) for r in qkv}
        if len(counts) != 1:
            raise PolicyError("Q/K/V group counts differ; cannot rebalance")
        lists = rebalance.QkvRankLists(
            lq=np.array([gp.k_real for gp in role_groups["Q"]]),
            lk=np.array([gp.k_real for gp in role_groups["K"]]),
            lv=np.array([gp.k_real for gp in role_groups["V"]]),
            omega_q=np.array([gp.omega for gp in role_groups["Q"]], dtype=np.float64),
            omega_k=np.array([gp.omega for gp in role_groups["K"]], dtype=np.float64),
            omega_v=np.array([gp.omega for gp in role_groups["V"]], dtype=np.float64),
            kmax_v=np.array([gp.kmax for gp in role_groups["V"]], dtype=np.float64),
        )
        moved = rebalance.rebalance_qkv(lists, beta)
        beta_effective = moved.beta_effective
        for role, new in zip(qkv, (moved.lq, moved.lk, moved.lv)):
            for gp, kr in zip(role_groups[role], new):
                gp.k_real = float(kr)

    # integerize; budgets for Q/K/V follow the rebalanced parameter mass
    def real_mass(role: str) -> float:
        return float(
            np.dot(
                [gp.k_real for gp in role_groups[role]],
                [gp.omega for gp in role_groups[role]],
            )
        )

    def integer_budget(role: str) -> float:
        if pooled_budget or (role in qkv and beta > 0):
            return real_mass(role)
        return role_budget[role]

    if pooled_budget:
        # one joint repair across every group; rebalance conserved the pool
        p = problem(order, sum(real_mass(r) for r in order))
        alloc = allocator.integerize(p, np.array([gp.k_real for r in order for gp in role_groups[r]]))
        i = 0
        for role in order:
            for gp in role_groups[role]:
                gp.k_int = int(alloc.k_int[i])
                gp.params = gp.k_int * gp.omega
                i += 1
    else:
        for role in order:
            p = problem([role], integer_budget(role))
            try:
                alloc = allocator.integerize(p, np.array([gp.k_real for gp in role_groups[role]]))
            except allocator.BudgetError as exc:
                raise allocator.BudgetError(f"role {role}: {exc}") from exc
            for gp, ki in zip(role_groups[role], alloc.k_int):
                gp.k_int = int(ki)
                gp.params = gp.k_int * gp.omega

    roles = {}
    for role in order:
        gps = role_groups[role]
        spec = manifest.roles[role]
        roles[role] = RolePlan(
            role=role,
            original_params=manifest.layers * spec.d_in * spec.d_out,
            budget=integer_budget(role),
            spent=sum(gp.params for gp in gps),
            groups=gps,
        )

    total_original = sum(rp.original_params for rp in roles.values())
    if theta >= 0.4:
        warnings.append(HIGH_RATIO_WARNING)
    return CompressionPlan(
        theta=theta,
        beta=beta,
        beta_effective=beta_effective,
        attention_kind=manifest.attention_kind,
        group_size=gsizes,
        pooled_budget=pooled_budget,
        whitener="lower" if lower_cholesky else "upper",
        roles=roles,
        total_original=total_original,
        total_budget=sum(role_budget.values()),
        total_spent=sum(rp.spent for rp in roles.values()),
        warnings=warnings,
    )


# ---------------------------------------------------------------------------
# compress


def compress_model(
    plan_: CompressionPlan,
    manifest: ModelManifest,
    weights: tensor_store.TensorStore,
    gram: tensor_store.TensorStore,
    store_dtype: str = "f32",
) -> tuple[bytes, dict]:
    """Execute a plan; returns the compressed store bytes and per-group reports.

    Error metrics are computed from the factors as they will be stored (after
    dtype rounding), so verify() can reproduce them from the bytes exactly.
    """
    if store_dtype not in STORE_DTYPES:
        raise ValueError(f"store_dtype must be one of {sorted(STORE_DTYPES)}")
    dtype = STORE_DTYPES[store_dtype]
    lower = plan_.whitener == "lower"

    tensors: dict[str, np.ndarray] = {}
    reports: dict[str, list[dict[str, float]]] = {}
    stored_params = 0
    for role in [r for r in ROLES if r in plan_.roles]:
        for gp in plan_.roles[role].groups:
            g = _build_group(manifest, weights, gram, role, gp.members, lower)
            f = compressor.compress_group(g, gp.k_int)
            B = np.ascontiguousarray(f.B, dtype=dtype)
            C_list = [np.ascontiguousarray(C, dtype=dtype) for C in f.C_list]
            stored = compressor.FactoredGroup(
                B=B.astype(np.float64),
                C_list=tuple(C.astype(np.float64) for C in C_list),
                k=f.k,
            )
            grams = [_load_gram(gram, layer, role) for layer in gp.members]
            reports[f"{role}/{gp.index}"] = compressor.compression_report(g.W_list, stored, grams)
            tensors[BASIS_NAME.format(role=role, group=gp.index)] = B
            for layer, C in zip(gp.members, C_list):
                tensors[COEFF_NAME.format(role=role, layer=layer)] = C
            stored_params += B.size + sum(C.size for C in C_list)

    if stored_params != plan_.total_spent:
        raise VerificationError(
            f"stored parameter count {stored_params} does not match plan spend {plan_.total_spent}"
        )

    metadata = {
        "format": "drank-compressed-v1",
        "store_dtype": store_dtype,
        "plan": plan_.to_json(),
        "manifest": json.dumps(manifest.to_dict(), sort_keys=True),
    }
    for key, rep in reports.items():
        metadata[f"report/{key}"] = json.dumps(rep, sort_keys=True)
    return tensor_store.write_store(tensors, metadata), reports


# ---------------------------------------------------------------------------
# verify


REPORT_AGREEMENT_RTOL = 1e-5


def _rel_diff(a: float, b: float) -> float:
    scale = max(abs(a), abs(b))
    return abs(a - b) / scale if scale > 0 else 0.0


def verify(
    manifest: ModelManifest,
    weights: tensor_store.TensorStore,
    gram: tensor_store.TensorStore,
    compressed: tensor_store.TensorStore,
) -> dict:
    """Recompute every group's errors from the stored factors and compare.

    Flags any group whose recomputed metrics disagree with the compress-time
    report beyond REPORT_AGREEMENT_RTOL, and any store/plan inconsistency.
    """
    if "plan" not in compressed.metadata:
        raise VerificationError("compressed store carries no plan metadata")
    plan_ = CompressionPlan.from_json(compressed.metadata["plan"])
    stored_manifest = json.loads(compressed.metadata.get("manifest", "{}"))
    if stored_manifest and stored_manifest != manifest.to_dict():
        raise VerificationError("manifest does not match the one recorded at compress time")

    groups = []
    flagged = []
    stored_params = 0
    for role in [r for r in ROLES if r in plan_.roles]:
        for gp in plan_.roles[role].groups:
            bname = BASIS_NAME.format(role=role, group=gp.index)
            if bname not in compressed:
                raise VerificationError(f"compressed store is missing {bname!r}")
            B = np.asarray(compressed.get(bname), dtype=np.float64)
            C_list = []
            for layer in gp.members:
                cname = COEFF_NAME.format(role=role, layer=layer)
                if cname not in compressed:
                    raise VerificationError(f"compressed store is missing {cname!r}")
                C_list.append(np.asarray(compressed.get(cname), dtype=np.float64))
            if B.shape != (gp.d1, gp.k_int) or any(C.shape != (gp.k_int, gp.d2) for C in C_list):
                raise VerificationError(f"factor shapes for {role}/{gp.index} disagree with the plan")
            stored_params += B.size + sum(C.size for C in C_list)

            f = compressor.FactoredGroup(B=B, C_list=tuple(C_list), k=gp.k_int)
            W_list = [_load_weight(weights, manifest, layer, role) for layer in gp.members]
            grams = [_load_gram(gram, layer, role) for layer in gp.members]
            recomputed = compressor.compression_report(W_list, f, grams)

            key = f"report/{role}/{gp.index}"
            stored_report = json.loads(compressed.metadata.get(key, "null"))
            if stored_report is None:
                raise VerificationError(f"compressed store carries no report for {role}/{gp.index}")

            worst = 0.0
            for rec, stored in zip(recomputed, stored_report):
                for metric in ("frob_err", "rel_frob_err", "activation_weighted_err"):
                    worst = max(worst, _rel_diff(rec[metric], stored[metric]))
            entry = {
                "role": role,
                "group": gp.index,
                "members": gp.members,
                "k": gp.k_int,
                "recomputed": recomputed,
                "stored": stored_report,
                "max_rel_disagreement": worst,
                "flagged": worst > REPORT_AGREEMENT_RTOL,
            }
            groups.append(entry)
            if entry["flagged"]:
                flagged.append(f"{role}/{gp.index}")

    if stored_params != plan_.total_spent:
        raise VerificationError(
            f"stored parameter count {stored_params} does not match plan spend {plan_.total_spent}"
        )

    return {
        "theta": plan_.theta,
        "beta": plan_.beta,
        "groups": groups,
        "flagged": flagged,
        "stored_params": stored_params,
        "original_params": plan_.total_original,
        "stored_ratio": stored_params / plan_.total_original,
        "ok": not flagged,
    }


# ---------------------------------------------------------------------------
# bench


def bench(
    d1: int,
    d2: int,
    k: int,
    token_batch: int = 256,
    repeats: int = 5,
    seed: int = 0,
) -> dict:
    """GEMM throughput of the dense map X@W vs the factored map (X@B)@C.

    Both paths apply the same linear map (W is materialized as B@C), so the
    outputs must agree to f32 tolerance before anything is timed. Reports
    median-of-repeats tokens/second for each path.
    """
    if not 1 <= k <= min(d1, d2):
        raise ValueError(f"k={k} out of range [1, {min(d1, d2)}]")
    if repeats < 3:
        raise ValueError("repeats must be >= 3")
    rng = np.random.default_rng(seed)
    B = rng.standard_normal((d1, k), dtype=np.float32)
    C = rng.standard_normal((k, d2), dtype=np.float32)
    X = rng.standard_normal((token_batch, d1), dtype=np.float32)
    W = B @ C

    dense_out = X @ W
    factored_out = (X @ B) @ C
    denom = float(np.linalg.norm(dense_out))
    agreement = float(np.linalg.norm(dense_out - factored_out)) / denom if denom > 0 else 0.0
    if agreement > 1e-4:
        raise VerificationError(f"dense and factored outputs disagree: rel err {agreement:.3e}")

    def median_time(fn) -> float:
        fn()  # warmup
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            fn()
            times.append(time.perf_counter() - t0)
        return float(np.median(times))

    t_dense = median_time(lambda: X @ W)
    t_factored = median_time(lambda: (X @ B) @ C)
    return {
        "d1": d1,
        "d2": d2,
        "k": k,
        "token_batch": token_batch,
        "repeats": repeats,
        "seed": seed,
        "agreement_rel_err": agreement,
        "flop_ratio": k * (d1 + d2) / (d1 * d2),
        "dense_tokens_per_sec": token_batch / t_dense,
        "factored_tokens_per_sec": token_batch / t_factored,
        "speedup": t_dense / t_factored,
    }
