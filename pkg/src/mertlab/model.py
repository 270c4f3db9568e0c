"""Student encoder: strided conv front end, conv positional embedding, transformer
stack (Pre-LN or Post-LN, optional attention relaxation) and prediction heads."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import grad as G
from .grad import Tensor

DEFAULT_CONV = ((64, 10, 5), (64, 8, 4), (64, 4, 2), (64, 4, 2), (64, 4, 2), (64, 2, 2), (64, 2, 1))
FRAME_STRIDE = 320


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    conv_layers: tuple[tuple[int, int, int], ...] = DEFAULT_CONV  # (channels, kernel, stride)
    d_model: int = 192
    n_layers: int = 4
    n_heads: int = 4
    ffn_dim: int = 768
    ln_mode: str = "pre"
    attention_relaxation_c: float = 1.0
    pos_conv_kernel: int = 128
    pos_conv_groups: int = 16
    head_vocab: tuple[int, ...] = (1024,) * 8
    codeword_dim: int = 64
    cqt_bins: int = 84
    tau: float = 0.1
    dropout: float = 0.0
    ln_eps: float = 1e-5

    def __post_init__(self):
        self.conv_layers = tuple(tuple(int(v) for v in layer) for layer in self.conv_layers)
        self.head_vocab = tuple(int(v) for v in self.head_vocab)
        stride = math.prod(s for _, _, s in self.conv_layers)
        if stride != FRAME_STRIDE:
            raise ConfigError(f"conv strides multiply to {stride}, need {FRAME_STRIDE}")
        if any(k < s for _, k, s in self.conv_layers):
            raise ConfigError("every conv kernel must be at least its stride")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.d_model % self.pos_conv_groups:
            raise ConfigError(f"d_model {self.d_model} not divisible by pos_conv_groups {self.pos_conv_groups}")
        if self.ln_mode not in ("pre", "post"):
            raise ConfigError(f"ln_mode must be 'pre' or 'post', got {self.ln_mode!r}")
        if self.attention_relaxation_c < 1:
            raise ConfigError("attention_relaxation_c must be >= 1")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must be in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_layers"] = [list(layer) for layer in self.conv_layers]
        d["head_vocab"] = list(self.head_vocab)
        return d


def parameter_count(config: ModelConfig) -> int:
    """Exact number of scalar parameters implied by ``config``."""
    n = 0
    c_in = 1
    for c_out, k, _ in config.conv_layers:
        n += c_out * c_in * k + 2 * c_out  # weight + layer-norm gain/bias
        c_in = c_out
    d, f = config.d_model, config.ffn_dim
    n += 2 * c_in + c_in * d + d  # feature norm + projection
    n += d  # mask embedding
    n += d * (d // config.pos_conv_groups) * config.pos_conv_kernel + d
    n += 2 * d  # encoder norm
    per_layer = 4 * (d * d + d) + 2 * (2 * d) + d * f + f + f * d + d
    n += config.n_layers * per_layer
    for vocab in config.head_vocab:
        n += d * config.codeword_dim + config.codeword_dim + vocab * config.codeword_dim
    n += d * config.cqt_bins + config.cqt_bins
    return n


@dataclass
class EncoderOutput:
    hidden_states: list[Tensor]
    final: Tensor

    @property
    def frames(self) -> int:
        return self.final.shape[-2]


def _mask_array(mask, batch: int, frames: int) -> np.ndarray | None:
    """Normalise a mask argument (None, bool array, MaskSpec, or list of MaskSpec) to (B, L) bool."""
    if mask is None:
        return None
    if hasattr(mask, "masked_indices"):
        mask = [mask] * batch
    if isinstance(mask, (list, tuple)) and mask and hasattr(mask[0], "masked_indices"):
        out = np.zeros((batch, frames), dtype=bool)
        for b, spec in enumerate(mask):
            idx = np.asarray(spec.masked_indices, dtype=np.int64)
            if idx.size and (idx.min() < 0 or idx.max() >= frames):
                raise IndexError(f"mask index out of range for {frames} frames")
            out[b, idx] = True
        return out
    arr = np.asarray(mask, dtype=bool)
    if arr.shape != (batch, frames):
        raise IndexError(f"mask shape {arr.shape} does not match (batch, frames) = {(batch, frames)}")
    return arr


class Encoder:
    """Parameters live in ``self.params`` (name -> Tensor) so they can be saved and optimised directly."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        cfg = config

        def add(name, shape, std=None, value=None):
            if value is None:
                data = rng.normal(0.0, std, size=shape)
            else:
                data = np.full(shape, value, dtype=np.float64)
            self.params[name] = Tensor(data.astype(self.dtype), requires_grad=True, name=name)

        c_in = 1
        for i, (c_out, k, _) in enumerate(cfg.conv_layers):
            add(f"conv{i}.weight", (c_out, c_in, k), std=math.sqrt(2.0 / (c_in * k)))
            add(f"conv{i}.ln.gain", (c_out,), value=1.0)
            add(f"conv{i}.ln.bias", (c_out,), value=0.0)
            c_in = c_out
        d = cfg.d_model
        add("feat_ln.gain", (c_in,), value=1.0)
        add("feat_ln.bias", (c_in,), value=0.0)
        add("proj.weight", (c_in, d), std=1.0 / math.sqrt(c_in))
        add("proj.bias", (d,), value=0.0)
        self.params["mask_emb"] = Tensor(rng.uniform(0.0, 1.0, d).astype(self.dtype), requires_grad=True, name="mask_emb")
        cg = d // cfg.pos_conv_groups
        add("pos_conv.weight", (d, cg, cfg.pos_conv_kernel), std=math.sqrt(2.0 / (cg * cfg.pos_conv_kernel)) * 0.5)
        add("pos_conv.bias", (d,), value=0.0)
        add("enc_ln.gain", (d,), value=1.0)
        add("enc_ln.bias", (d,), value=0.0)
        resid_std = 1.0 / math.sqrt(2.0 * cfg.n_layers)
        for layer in range(cfg.n_layers):
            p = f"layer{layer}."
            for w in ("q", "k", "v"):
                add(p + f"attn.w{w}", (d, d), std=1.0 / math.sqrt(d))
                add(p + f"attn.b{w}", (d,), value=0.0)
            add(p + "attn.wo", (d, d), std=resid_std / math.sqrt(d))
            add(p + "attn.bo", (d,), value=0.0)
            for ln in ("ln1", "ln2"):
                add(p + f"{ln}.gain", (d,), value=1.0)
                add(p + f"{ln}.bias", (d,), value=0.0)
            add(p + "ffn.w1", (d, cfg.ffn_dim), std=1.0 / math.sqrt(d))
            add(p + "ffn.b1", (cfg.ffn_dim,), value=0.0)
            add(p + "ffn.w2", (cfg.ffn_dim, d), std=resid_std / math.sqrt(cfg.ffn_dim))
            add(p + "ffn.b2", (d,), value=0.0)
        for j, vocab in enumerate(cfg.head_vocab):
            add(f"head{j}.proj.weight", (d, cfg.codeword_dim), std=1.0 / math.sqrt(d))
            add(f"head{j}.proj.bias", (cfg.codeword_dim,), value=0.0)
            add(f"head{j}.codewords", (vocab, cfg.codeword_dim), std=1.0)
        add("cqt.weight", (d, cfg.cqt_bins), std=1.0 / math.sqrt(d))
        add("cqt.bias", (cfg.cqt_bins,), value=0.0)

    # ------------------------------------------------------------ helpers

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        unexpected = set(state) - set(self.params)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(unexpected)[:5]}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ValueError(f"parameter {k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=self.dtype)

    def _ln(self, x: Tensor, prefix: str) -> Tensor:
        p = self.params
        return G.layer_norm(x, self.config.ln_eps) * p[prefix + ".gain"] + p[prefix + ".bias"]

    def _linear(self, x: Tensor, w: str, b: str) -> Tensor:
        return x @ self.params[w] + self.params[b]

    # ------------------------------------------------------------ front end

    def n_frames(self, n_samples: int) -> int:
        n = n_samples
        for _, _, s in self.config.conv_layers:
            n //= s
        return n

    def conv_encode(self, waves) -> Tensor:
        """(B, N) waveforms -> (B, L, d_model) frame features, L = N // 320."""
        w = waves.data if isinstance(waves, Tensor) else np.asarray(waves)
        if w.ndim == 1:
            w = w[None, :]
        if w.shape[-1] == 0 or self.n_frames(w.shape[-1]) < 1:
            raise ValueError(f"input of {w.shape[-1]} samples is too short for one {FRAME_STRIDE}-sample frame")
        x = waves if isinstance(waves, Tensor) else Tensor(w.astype(self.dtype))
        if x.ndim == 1:
            x = G.reshape(x, (1, -1))
        x = G.reshape(x, (x.shape[0], 1, x.shape[1]))
        for i, (_, k, s) in enumerate(self.config.conv_layers):
            pad = k - s
            x = G.conv1d(x, self.params[f"conv{i}.weight"], stride=s, padding=(pad // 2, pad - pad // 2))
            x = G.transpose(x, (0, 2, 1))
            x = G.gelu(self._ln(x, f"conv{i}.ln"))
            x = G.transpose(x, (0, 2, 1))
        x = G.transpose(x, (0, 2, 1))  # (B, L, C)
        x = self._ln(x, "feat_ln")
        return self._linear(x, "proj.weight", "proj.bias")

    # ------------------------------------------------------------ transformer

    def positional(self, x: Tensor) -> Tensor:
        """x + GELU(grouped conv over time); translation-equivariant away from the edges."""
        L = x.shape[1]
        k = self.config.pos_conv_kernel
        h = G.transpose(x, (0, 2, 1))
        h = G.conv1d(h, self.params["pos_conv.weight"], self.params["pos_conv.bias"], padding=k // 2,
                     groups=self.config.pos_conv_groups)
        h = G.gelu(h[:, :, :L])
        return x + G.transpose(h, (0, 2, 1))

    def attention(self, x: Tensor, prefix: str, rng=None) -> Tensor:
        cfg = self.config
        B, L, D = x.shape
        H = cfg.n_heads
        dh = D // H

        def split(name):
            t = self._linear(x, prefix + f"attn.w{name}", prefix + f"attn.b{name}")
            return G.transpose(G.reshape(t, (B, L, H, dh)), (0, 2, 1, 3))

        q, k, v = split("q"), split("k"), split("v")
        scores = (q @ G.transpose(k, (0, 1, 3, 2))) * (1.0 / (math.sqrt(dh) * cfg.attention_relaxation_c))
        weights = G.dropout(G.softmax(scores, axis=-1), cfg.dropout, rng)
        out = G.reshape(G.transpose(weights @ v, (0, 2, 1, 3)), (B, L, D))
        return self._linear(out, prefix + "attn.wo", prefix + "attn.bo")

    def feed_forward(self, x: Tensor, prefix: str, rng=None) -> Tensor:
        h = G.gelu(self._linear(x, prefix + "ffn.w1", prefix + "ffn.b1"))
        h = G.dropout(h, self.config.dropout, rng)
        return self._linear(h, prefix + "ffn.w2", prefix + "ffn.b2")

    def transformer_forward(self, frames: Tensor, mask=None, rng=None) -> EncoderOutput:
        """Run the transformer over (B, L, d_model) frame features.

        Masked frames are replaced by the learned mask embedding before the
        positional convolution. ``hidden_states[0]`` is the transformer input,
        ``hidden_states[i]`` the output of layer ``i``; the last entry equals
        ``final`` (after the closing norm in Pre-LN mode).
        """
        cfg = self.config
        B, L, _ = frames.shape
        m = _mask_array(mask, B, L)
        x = frames
        if m is not None and m.any():
            mf = m[:, :, None].astype(self.dtype)
            x = x * Tensor(1.0 - mf) + Tensor(mf) * self.params["mask_emb"]
        x = self.positional(x)
        if cfg.ln_mode == "post":
            x = self._ln(x, "enc_ln")
        x = G.dropout(x, cfg.dropout, rng)
        hidden = [x]
        for layer in range(cfg.n_layers):
            p = f"layer{layer}."
            if cfg.ln_mode == "pre":
                x = x + G.dropout(self.attention(self._ln(x, p + "ln1"), p, rng), cfg.dropout, rng)
                x = x + G.dropout(self.feed_forward(self._ln(x, p + "ln2"), p, rng), cfg.dropout, rng)
            else:
                x = self._ln(x + G.dropout(self.attention(x, p, rng), cfg.dropout, rng), p + "ln1")
                x = self._ln(x + G.dropout(self.feed_forward(x, p, rng), cfg.dropout, rng), p + "ln2")
            hidden.append(x)
        if cfg.ln_mode == "pre":
            x = self._ln(x, "enc_ln")
            hidden[-1] = x
        return EncoderOutput(hidden, x)

    def forward(self, waves, mask=None, rng=None) -> EncoderOutput:
        return self.transformer_forward(self.conv_encode(waves), mask, rng)

    # ------------------------------------------------------------ heads

    def acoustic_logits(self, o: Tensor, head: int) -> Tensor:
        """cos(T(o_t), e_c) / tau for every frame row of ``o`` (..., d_model) -> (..., k)."""
        p = self.params
        proj = self._linear(o, f"head{head}.proj.weight", f"head{head}.proj.bias")
        e = G.normalize(p[f"head{head}.codewords"])
        return (G.normalize(proj) @ G.transpose(e)) * (1.0 / self.config.tau)

    def predict_acoustic_logits(self, output: EncoderOutput, head: int) -> Tensor:
        return self.acoustic_logits(output.final, head)

    def predict_cqt(self, output: EncoderOutput | Tensor) -> Tensor:
        o = output.final if isinstance(output, EncoderOutput) else output
        return self._linear(o, "cqt.weight", "cqt.bias")
