import numpy as np
import pytest

from drank import tensor_store
from drank.pipeline import ModelManifest, RoleSpec


def toy_model(rng, layers=4, d=32, ff=48, attention_kind="MHA", kv_dim=None):
    """Random weights + gram stores and a manifest for a small transformer stack."""
    d_kv = kv_dim if kv_dim is not None else d
    roles = {
        "Q": RoleSpec(d, d, "w/{layer}/Q"),
        "K": RoleSpec(d, d_kv, "w/{layer}/K"),
        "V": RoleSpec(d, d_kv, "w/{layer}/V"),
        "O": RoleSpec(d, d, "w/{layer}/O"),
        "up": RoleSpec(d, ff, "w/{layer}/up"),
        "gate": RoleSpec(d, ff, "w/{layer}/gate"),
        "down": RoleSpec(ff, d, "w/{layer}/down"),
    }
    manifest = ModelManifest(layers=layers, attention_kind=attention_kind, roles=roles)

    weights, grams, meta = {}, {}, {}
    for layer in range(layers):
        for role, spec in roles.items():
            weights[spec.tensor_name(layer)] = rng.standard_normal((spec.d_in, spec.d_out))
            X = rng.standard_normal((3 * spec.d_in, spec.d_in))
            grams[f"gram/{layer}/{role}"] = X.T @ X
            meta[f"samples/{layer}/{role}"] = str(3 * spec.d_in)

    wstore = tensor_store.read_store(tensor_store.write_store(weights))
    gstore = tensor_store.read_store(tensor_store.write_store(grams, meta))
    return manifest, wstore, gstore


def structured_layer(rng, d1, d2, rho, noise=0.05):
    """Weight with a layer-specific dominant subspace and geometric spectrum decay.

    Mirrors real transformer layers: each layer concentrates energy in its own
    few directions, so cross-layer concatenation inflates the union rank.
    """
    U, _ = np.linalg.qr(rng.standard_normal((d1, d2)))
    V, _ = np.linalg.qr(rng.standard_normal((d2, d2)))
    spec = rho ** np.arange(d2)
    return (U * spec) @ V.T + noise * rng.standard_normal((d1, d2))


def slim_stack_errors(rng, layers=8, d1=64, d2=16, theta=0.2, sizes=(1, 2, 4)):
    """Mean per-matrix whitened error of the full method at each group size."""
    from drank import allocator, whitening
    from drank.compressor import LayerGroup, compress_group, compression_report, concat_group
    from drank.effective_rank import group_effective_rank
    from drank.whitening import GramStats, build_group_whitener

    Ws = [structured_layer(rng, d1, d2, rho=float(rng.uniform(0.5, 0.85))) for _ in range(layers)]
    stats = []
    for layer in range(layers):
        X = rng.standard_normal((3 * d1, d1))
        stats.append(GramStats("K", layer, X.T @ X, samples=3 * d1))
    budget = layers * d1 * d2 * (1 - theta)

    errs = {}
    for n in sizes:
        reff, omegas, kmaxs, built = [], [], [], []
        for i in range(0, layers, n):
            members = tuple(range(i, min(i + n, layers)))
            g = LayerGroup(
                role="K",
                members=members,
                W_list=tuple(Ws[m] for m in members),
                whitener=build_group_whitener([stats[m] for m in members]),
            )
            scaled = whitening.scale(concat_group(g.W_list), g.whitener)
            reff.append(group_effective_rank(scaled).value)
            omegas.append(d1 + len(members) * d2)
            kmaxs.append(min(d1, len(members) * d2))
            built.append(g)
        alloc = allocator.allocate(
            allocator.AllocationProblem(
                reff=np.array(reff), omega=np.array(omegas), budget=budget, kmax=np.array(kmaxs)
            )
        )
        total = 0.0
        for g, k in zip(built, alloc.k_int):
            rep = compression_report(g.W_list, compress_group(g, int(k)), [stats[m] for m in g.members])
            total += sum(e["activation_weighted_err"] for e in rep)
        errs[n] = total / layers
    return errs


@pytest.fixture
def rng():
    return np.random.default_rng(20260810)
