"""Checkpoint export and calibration-time Gram capture.

Weight matrices are written in the engine's d_in x d_out convention (the
transpose of ``nn.Linear.weight``). Gram statistics are the per-projection
input products X^T X, accumulated in f64 over every calibration token via
forward pre-hooks on the projection modules.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .store_writer import save_store

ROLE_PATHS = {
    "Q": ("self_attn", "q_proj"),
    "K": ("self_attn", "k_proj"),
    "V": ("self_attn", "v_proj"),
    "O": ("self_attn", "o_proj"),
    "up": ("mlp", "up_proj"),
    "gate": ("mlp", "gate_proj"),
    "down": ("mlp", "down_proj"),
}

WEIGHT_PATTERN = "w/{layer}/{role}"


class ArchitectureError(ValueError):
    """Model does not expose the expected decoder-layer projections."""


class CorpusError(RuntimeError):
    """Calibration corpus could not be fetched or tokenized."""


@dataclass
class CalibrationConfig:
    model: str
    corpus: str = "wikitext2"
    sample_count: int = 256
    sequence_length: int = 2048
    seed: int = 0
    weights_out: Path = Path("weights.dst")
    gram_out: Path = Path("gram.dst")
    manifest_out: Path = Path("manifest.json")

    def __post_init__(self):
        if self.sample_count < 1:
            raise ValueError("sample_count must be >= 1")
        if self.sequence_length < 1:
            raise ValueError("sequence_length must be >= 1")


def load_model(model_id: str):
    from transformers import AutoModelForCausalLM

    model = AutoModelForCausalLM.from_pretrained(model_id, dtype=torch.float32)
    model.eval()
    return model


def _decoder_layers(model) -> list:
    decoder = getattr(model, "model", model)
    layers = getattr(decoder, "layers", None)
    if layers is None:
        raise ArchitectureError(f"unknown architecture {type(model).__name__}: no decoder layers found")
    return list(layers)


def _projection(layer, role: str) -> torch.nn.Linear:
    block, attr = ROLE_PATHS[role]
    try:
        return getattr(getattr(layer, block), attr)
    except AttributeError as exc:
        raise ArchitectureError(f"unknown architecture: layer has no {block}.{attr}") from exc


def build_manifest(model) -> dict:
    """Manifest document in the engine's schema; GQA detected from K/V width."""
    layers = _decoder_layers(model)
    first = layers[0]
    roles = {}
    for role in ROLE_PATHS:
        proj = _projection(first, role)
        roles[role] = {
            "d_in": proj.in_features,
            "d_out": proj.out_features,
            "pattern": WEIGHT_PATTERN.replace("{role}", role),
        }
    gqa = roles["K"]["d_out"] < roles["Q"]["d_out"]
    return {
        "layers": len(layers),
        "attention_kind": "GQA" if gqa else "MHA",
        "roles": roles,
    }


def export_weights(model, weights_out: str | Path, manifest_out: str | Path) -> dict:
    """Write every projection (transposed to d_in x d_out, f32) plus the manifest."""
    if isinstance(model, str):
        model = load_model(model)
    manifest = build_manifest(model)
    tensors = {}
    for i, layer in enumerate(_decoder_layers(model)):
        for role in ROLE_PATHS:
            W = _projection(layer, role).weight.detach()
            tensors[WEIGHT_PATTERN.format(layer=i, role=role)] = (
                W.T.contiguous().to(torch.float32).numpy()
            )
    save_store(weights_out, tensors, {"source": manifest_source_name(model)})
    Path(manifest_out).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def manifest_source_name(model) -> str:
    return getattr(getattr(model, "config", None), "name_or_path", "") or type(model).__name__


# ---------------------------------------------------------------------------
# calibration corpus


def _wikitext_token_batches(cfg: CalibrationConfig, tokenizer) -> list[torch.Tensor]:
    try:
        from datasets import load_dataset

        data = load_dataset("wikitext", "wikitext-2-raw-v1", split="train")
        text = "\n\n".join(data["text"])
    except Exception as exc:
        raise CorpusError(
            f"failed to fetch the wikitext2 corpus ({exc}); pass a local text file "
            "or use --corpus synthetic"
        ) from exc
    return _sample_text(text, cfg, tokenizer)


def _sample_text(text: str, cfg: CalibrationConfig, tokenizer) -> list[torch.Tensor]:
    if tokenizer is None:
        raise CorpusError("a tokenizer is required for text corpora")
    ids = tokenizer(text, return_tensors="pt").input_ids[0]
    if ids.numel() < cfg.sequence_length:
        raise CorpusError(
            f"corpus has {ids.numel()} tokens, fewer than sequence_length={cfg.sequence_length}"
        )
    rng = np.random.default_rng(cfg.seed)
    starts = rng.integers(0, ids.numel() - cfg.sequence_length + 1, size=cfg.sample_count)
    return [ids[s : s + cfg.sequence_length].unsqueeze(0) for s in starts]


def _synthetic_token_batches(cfg: CalibrationConfig, vocab_size: int) -> list[torch.Tensor]:
    rng = np.random.default_rng(cfg.seed)
    ids = rng.integers(0, vocab_size, size=(cfg.sample_count, cfg.sequence_length))
    return [torch.from_numpy(row).unsqueeze(0) for row in ids.astype(np.int64)]


def corpus_batches(cfg: CalibrationConfig, model, tokenizer=None) -> list[torch.Tensor]:
    if cfg.corpus == "synthetic":
        return _synthetic_token_batches(cfg, int(model.config.vocab_size))
    if cfg.corpus == "wikitext2":
        return _wikitext_token_batches(cfg, tokenizer)
    path = Path(cfg.corpus)
    if path.exists():
        return _sample_text(path.read_text(), cfg, tokenizer)
    raise CorpusError(f"unknown corpus {cfg.corpus!r}: expected wikitext2, synthetic, or a text file")


# ---------------------------------------------------------------------------
# gram capture


class _GramHook:
    def __init__(self, dim: int):
        self.G = np.zeros((dim, dim), dtype=np.float64)
        self.samples = 0

    def __call__(self, module, args, kwargs):
        x = args[0] if args else kwargs["hidden_states"]
        flat = x.reshape(-1, x.shape[-1]).detach().to(torch.float64).numpy()
        self.G += flat.T @ flat
        self.samples += flat.shape[0]


def capture_gram_from_batches(model, batches) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    """Accumulate X^T X for every projection over the given token batches."""
    layers = _decoder_layers(model)
    hooks: dict[tuple[int, str], _GramHook] = {}
    handles = []
    for i, layer in enumerate(layers):
        for role in ROLE_PATHS:
            proj = _projection(layer, role)
            hook = _GramHook(proj.in_features)
            hooks[(i, role)] = hook
            handles.append(proj.register_forward_pre_hook(hook, with_kwargs=True))
    try:
        with torch.inference_mode():
            for ids in batches:
                model(input_ids=ids)
    finally:
        for h in handles:
            h.remove()

    tensors = {}
    metadata = {}
    for (i, role), hook in hooks.items():
        tensors[f"gram/{i}/{role}"] = hook.G
        metadata[f"samples/{i}/{role}"] = str(hook.samples)
    return tensors, metadata


def capture_gram(cfg: CalibrationConfig, model=None, tokenizer=None) -> None:
    """End-to-end capture: sample the corpus, hook every projection, write the store."""
    if model is None:
        model = load_model(cfg.model)
    if tokenizer is None and cfg.corpus not in ("synthetic",):
        from transformers import AutoTokenizer

        tokenizer = AutoTokenizer.from_pretrained(cfg.model)
    batches = corpus_batches(cfg, model, tokenizer)
    tensors, metadata = capture_gram_from_batches(model, batches)
    metadata.update(
        {
            "model": cfg.model,
            "corpus": cfg.corpus,
            "seed": str(cfg.seed),
            "sample_count": str(cfg.sample_count),
            "sequence_length": str(cfg.sequence_length),
        }
    )
    save_store(cfg.gram_out, tensors, metadata)
