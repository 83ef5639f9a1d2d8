"""The three-part client network and its composite training loss.

A client model is the parameter partition ``[encoder | shared-feature part |
mapper]`` plus an optional decoder head:

* encoder: task-specific, maps the task's AP space (m) into the shared latent
  space (d),
* decoder: reconstructs the input from the latent space (auxiliary objective),
* feature part ("meta"): shared across clients, maps d -> n,
* mapper: task-specific, maps features to coordinates (n -> p).

The composite loss is prediction MSE plus ``lambda_recon`` times the
reconstruction MSE; with ``lambda_recon = 0`` the decoder receives exactly
zero gradient.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import nn
from .errors import ConfigError, DataError

PART_NAMES = ("encoder", "decoder", "meta", "mapper")


@dataclass(frozen=True)
class ModelConfig:
    """Widths, learning rates, and loss weighting for one experiment."""

    m: int | None = None  # per-task input width; usually set at build time
    d: int = 50
    n: int = 32
    p: int = 2
    encoder_hidden: tuple[int, ...] = (1024,)
    decoder_hidden: tuple[int, ...] = (1024,)
    meta_hidden: tuple[int, ...] = (256, 128, 64)
    mapper_hidden: tuple[int, ...] = (64, 32)
    mu_encoder: float = 0.0095
    mu_meta: float = 0.0005
    mu_mapper: float = 0.0005
    lambda_recon: float = 0.1
    optimizer: str = "adam"
    encoder_init: str = "he"

    def __post_init__(self) -> None:
        for key in ("encoder_hidden", "decoder_hidden", "meta_hidden", "mapper_hidden"):
            object.__setattr__(self, key, tuple(getattr(self, key)))
        for name, dim in (("d", self.d), ("n", self.n), ("p", self.p)):
            if dim < 1:
                raise ConfigError(f"dimension {name} must be >= 1, got {dim}")
        if self.m is not None and self.m < 1:
            raise ConfigError(f"input width m must be >= 1, got {self.m}")
        for name, mu in (
            ("mu_encoder", self.mu_encoder),
            ("mu_meta", self.mu_meta),
            ("mu_mapper", self.mu_mapper),
        ):
            if mu <= 0:
                raise ConfigError(f"{name} must be > 0, got {mu}")
        if self.lambda_recon < 0:
            raise ConfigError(f"lambda_recon must be >= 0, got {self.lambda_recon}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.encoder_init not in ("he", "prefix_projection"):
            raise ConfigError(f"encoder_init must be 'he' or 'prefix_projection', got {self.encoder_init!r}")
        if self.encoder_init == "prefix_projection" and self.encoder_hidden:
            raise ConfigError("prefix_projection requires a single-layer (linear) encoder")

    def part_sizes(self, part: str, m: int | None = None) -> list[int]:
        m = m if m is not None else self.m
        if part in ("encoder", "decoder") and m is None:
            raise ConfigError("input width m is required to size the encoder/decoder")
        if part == "encoder":
            return [m, *self.encoder_hidden, self.d]
        if part == "decoder":
            return [self.d, *self.decoder_hidden, m]
        if part == "meta":
            return [self.d, *self.meta_hidden, self.n]
        if part == "mapper":
            return [self.n, *self.mapper_hidden, self.p]
        raise ConfigError(f"unknown model part {part!r}")

    def rates(self) -> dict[str, float]:
        return {
            "encoder": self.mu_encoder,
            "decoder": self.mu_encoder,
            "meta": self.mu_meta,
            "mapper": self.mu_mapper,
        }

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: Mapping) -> "ModelConfig":
        kwargs = dict(raw)
        for key in ("encoder_hidden", "decoder_hidden", "meta_hidden", "mapper_hidden"):
            if key in kwargs and kwargs[key] is not None:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


class ClientModel:
    """One client's four layer stacks plus per-part optimizer state."""

    def __init__(self, config: ModelConfig, parts: dict[str, list[nn.DenseLayer]]):
        self.config = config
        self.parts = parts
        self.opt_states: dict[str, nn.AdamState | None] = {p: None for p in PART_NAMES}
        enc, dec, meta, mapper = (parts[p] for p in PART_NAMES)
        if enc[-1].out_size != meta[0].in_size or meta[-1].out_size != mapper[0].in_size:
            raise ConfigError(
                f"shape chain broken: encoder->d={enc[-1].out_size}, meta in={meta[0].in_size}, "
                f"meta->n={meta[-1].out_size}, mapper in={mapper[0].in_size}"
            )
        if dec[0].in_size != enc[-1].out_size or dec[-1].out_size != enc[0].in_size:
            raise ConfigError("decoder must invert the encoder's dimensions")

    @classmethod
    def build(
        cls,
        config: ModelConfig,
        m: int | None = None,
        seed: int | np.random.SeedSequence = 0,
        part_seeds: Mapping[str, np.random.SeedSequence] | None = None,
    ) -> "ClientModel":
        """Seeded construction; each part draws from its own seed stream."""
        if part_seeds is None:
            ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
            part_seeds = dict(zip(PART_NAMES, ss.spawn(len(PART_NAMES))))
        parts = {
            part: nn.build_stack(config.part_sizes(part, m), part_seeds[part])
            for part in PART_NAMES
        }
        if config.encoder_init == "prefix_projection":
            # deterministic adapter start: the latent is the fingerprint of the
            # first d AP columns, identical for every client of a cohort that
            # shares its AP indexing
            enc = parts["encoder"][0]
            if enc.in_size < enc.out_size:
                raise ConfigError(
                    f"prefix_projection needs m >= d, got m={enc.in_size}, d={enc.out_size}"
                )
            enc.weights = np.eye(enc.out_size, enc.in_size)
            enc.biases = np.zeros(enc.out_size)
        return cls(config, parts)

    @property
    def m(self) -> int:
        return self.parts["encoder"][0].in_size

    def part_params(self, part: str) -> nn.ParamDict:
        return nn.export_params(self.parts[part])

    def set_part_params(self, part: str, params: nn.ParamDict) -> None:
        nn.assign_params(self.parts[part], params)

    def encode(self, x: np.ndarray) -> np.ndarray:
        return nn.forward(self.parts["encoder"], x)[0]

    def decode(self, latent: np.ndarray) -> np.ndarray:
        return nn.forward(self.parts["decoder"], latent)[0]

    def full_forward(self, x: np.ndarray) -> np.ndarray:
        """Composite prediction: mapper(meta(encoder(x)))."""
        return nn.forward(
            self.parts["mapper"],
            nn.forward(self.parts["meta"], nn.forward(self.parts["encoder"], x)[0])[0],
        )[0]

    def composite_loss(
        self, x: np.ndarray, y: np.ndarray
    ) -> tuple[float, dict[str, nn.GradientBundle]]:
        """Loss and gradients over all four parts for one batch.

        ``loss = MSE(prediction, y) + lambda_recon * MSE(reconstruction, x)``.
        """
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] == 0:
            raise DataError("composite_loss needs a nonempty 2-D batch")
        lam = self.config.lambda_recon

        latent, enc_cache = nn.forward(self.parts["encoder"], x)
        feats, meta_cache = nn.forward(self.parts["meta"], latent)
        pred, map_cache = nn.forward(self.parts["mapper"], feats)
        recon, dec_cache = nn.forward(self.parts["decoder"], latent)

        pred_loss, dpred = nn.mse_loss(pred, y)
        recon_loss, drecon = nn.mse_loss(recon, x)
        loss = pred_loss + lam * recon_loss

        map_grads, dfeats = nn.backward(map_cache, dpred)
        meta_grads, dlatent_pred = nn.backward(meta_cache, dfeats)
        dec_grads, dlatent_recon = nn.backward(dec_cache, lam * drecon)
        enc_grads, _ = nn.backward(enc_cache, dlatent_pred + dlatent_recon)
        return loss, {
            "encoder": enc_grads,
            "decoder": dec_grads,
            "meta": meta_grads,
            "mapper": map_grads,
        }

    def loss_value(self, x: np.ndarray, y: np.ndarray) -> float:
        """Composite loss without gradients (evaluation only)."""
        pred = self.full_forward(x)
        latent = self.encode(x)
        pred_loss, _ = nn.mse_loss(pred, np.asarray(y, dtype=np.float64))
        if self.config.lambda_recon == 0:
            return pred_loss
        recon_loss, _ = nn.mse_loss(self.decode(latent), np.asarray(x, dtype=np.float64))
        return pred_loss + self.config.lambda_recon * recon_loss

    def train_step(
        self,
        x: np.ndarray,
        y: np.ndarray,
        rates: Mapping[str, float] | None = None,
        parts: Sequence[str] | None = None,
        optimizer: str | None = None,
    ) -> float:
        """One optimizer step on a batch; returns the pre-step loss."""
        rates = dict(rates) if rates is not None else self.config.rates()
        parts = tuple(parts) if parts is not None else PART_NAMES
        optimizer = optimizer or self.config.optimizer
        loss, grads = self.composite_loss(x, y)
        for part in parts:
            params = nn.export_params(self.parts[part])
            if optimizer == "adam":
                if self.opt_states[part] is None:
                    self.opt_states[part] = nn.init_adam_state(params)
                new, state = nn.adam_step(params, grads[part], self.opt_states[part], rates[part])
                self.opt_states[part] = state
            else:
                new = nn.sgd_step(params, grads[part], rates[part])
            nn.assign_params(self.parts[part], new)
        return loss


def save_checkpoint(
    path: str | Path,
    parts: Mapping[str, nn.ParamDict],
    config: ModelConfig,
    extra: Mapping | None = None,
) -> None:
    """Flat binary map {part -> layer -> tensor} with a config header; bit-exact."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload: dict[str, np.ndarray] = {}
    for part, params in parts.items():
        for key, tensor in params.items():
            payload[f"{part}/{key}"] = np.asarray(tensor, dtype=np.float64)
    payload["__config__"] = np.str_(json.dumps(config.to_dict(), sort_keys=True))
    payload["__extra__"] = np.str_(json.dumps(dict(extra or {}), sort_keys=True))
    with path.open("wb") as fh:
        np.savez(fh, **payload)


def load_checkpoint(path: str | Path) -> tuple[ModelConfig, dict[str, nn.ParamDict], dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as archive:
        config = ModelConfig.from_dict(json.loads(str(archive["__config__"])))
        extra = json.loads(str(archive["__extra__"]))
        parts: dict[str, nn.ParamDict] = {}
        for full_key in archive.files:
            if full_key.startswith("__"):
                continue
            part, key = full_key.split("/", 1)
            parts.setdefault(part, {})[key] = archive[full_key]
    return config, parts, extra
