"""The spiking eye-emotion network.

Two extractors share one convolutional architecture:

* ``S`` (spatial) sees the first and last intensity frames once per sequence:
  a 1x1 conv lifts the frame pair to ``event_channels`` maps, the multiscale
  attention block weights three kernel-size branches, two 3x3 convs follow and
  a single LIF step turns the result into the spike map ``J_s``.
* ``T`` (temporal) sees one event frame per step through the same block with
  LIF layers between the convs, adds its spikes to ``J_s`` and runs two
  FC + LIF stages. The last layer's membrane potential is the class score.

With weight copy on, T's convolutions and attention layers are overwritten by
S's after every optimizer step and never receive gradients of their own.
"""

from __future__ import annotations

import contextlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormStats, Parameter, Tensor
from .snn import LifConfig, LifState, lif_step, membrane_readout

OUTPUT_MODES = ("mean_potential", "last_potential", "last_spike", "mean_spike")
CHECKPOINT_VERSION = 1
COPIED_GROUPS = ("shared_conv", "attention")


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    input_h: int = 64
    input_w: int = 64
    event_channels: int = 2
    branch_kernels: tuple[int, ...] = (3, 5, 7)
    branch_channels: int = 16
    fused_channels: int = 32
    conv_strides: tuple[int, int] = (2, 2)
    attention_hidden: int = 8
    fc_hidden: int = 256
    classes: int = 7
    lif: LifConfig = field(default_factory=LifConfig)
    surrogate_width: float = 1.0
    # ablation switches
    weight_copy: bool = True
    attention_copy: bool = True
    output_mode: str = "mean_potential"

    def __post_init__(self):
        if self.classes != 7:
            raise ValueError("the emotion head has exactly 7 classes")
        if any(k % 2 == 0 for k in self.branch_kernels):
            raise ValueError(f"branch kernels must be odd, got {self.branch_kernels}")
        if self.fused_channels <= 0 or self.branch_channels <= 0:
            raise ValueError("channel counts must be positive")
        if self.output_mode not in OUTPUT_MODES:
            raise ValueError(f"output_mode must be one of {OUTPUT_MODES}, got {self.output_mode!r}")
        object.__setattr__(self, "branch_kernels", tuple(int(k) for k in self.branch_kernels))
        object.__setattr__(self, "conv_strides", tuple(int(s) for s in self.conv_strides))

    @property
    def feature_shape(self) -> tuple[int, int, int]:
        h, w = self.input_h, self.input_w
        for s in self.conv_strides:
            # 3x3 conv, padding 1
            h, w = (h - 1) // s + 1, (w - 1) // s + 1
        return self.fused_channels, h, w

    def to_dict(self) -> dict:
        d = asdict(self)
        d["branch_kernels"] = list(self.branch_kernels)
        d["conv_strides"] = list(self.conv_strides)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "lif" in d and isinstance(d["lif"], dict):
            d["lif"] = LifConfig(**d["lif"])
        known = cls.__dataclass_fields__.keys()
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class SpatialOutput:
    J_s: Tensor
    omega: Tensor
    F_s: Tensor


@dataclass
class EmotionScores:
    O_t: list[Tensor]
    spikes: list[Tensor]
    logits: Tensor
    R: Tensor
    omega: Tensor
    omega_used: list[Tensor] = field(default_factory=list)


TEMPORAL_LAYERS = ("omega", "conv1", "fe", "fc1", "fc2")


def fresh_temporal_states() -> dict[str, LifState]:
    return {k: LifState() for k in TEMPORAL_LAYERS}


class SeenModel:
    def __init__(self, config: ModelConfig | None = None, seed: int = 0):
        self.config = config or ModelConfig()
        self.params: dict[str, Parameter] = {}
        self.bn: dict[str, BatchNormStats] = {}
        self.training = False
        self.upsilon_calls = {"S": 0, "T": 0}
        rng = np.random.default_rng(seed)
        cfg = self.config
        self._conv("S.ls", 2, cfg.event_channels, 1, "spatial_only", rng)
        # T's copies are initialised independently; training copies S over them.
        for side in ("S", "T"):
            for k in cfg.branch_kernels:
                self._conv(f"{side}.omega.branch{k}", cfg.event_channels, cfg.branch_channels, k, "shared_conv", rng)
                att = f"{side}.omega.att{k}"
                self._conv(f"{att}.fc1", cfg.branch_channels, cfg.attention_hidden, 1, "attention", rng)
                self._add(f"{att}.bn.scale", np.ones(cfg.attention_hidden), "attention")
                self._add(f"{att}.bn.shift", np.zeros(cfg.attention_hidden), "attention")
                self.bn[f"{att}.bn"] = BatchNormStats(cfg.attention_hidden)
                self._conv(f"{att}.fc2", cfg.attention_hidden, 1, 1, "attention", rng)
            nb = len(cfg.branch_kernels)
            self._conv(f"{side}.omega.fuse", nb * cfg.branch_channels, cfg.fused_channels, 1, "shared_conv", rng)
            self._conv(f"{side}.conv1", cfg.fused_channels, cfg.fused_channels, 3, "shared_conv", rng)
            self._conv(f"{side}.conv2", cfg.fused_channels, cfg.fused_channels, 3, "shared_conv", rng)
        flat = int(np.prod(cfg.feature_shape))
        self._fc("T.fc1", flat, cfg.fc_hidden, rng)
        self._fc("T.fc2", cfg.fc_hidden, cfg.classes, rng)
        self.set_trainable()

    # construction ------------------------------------------------------------

    def _add(self, name: str, value: np.ndarray, group: str) -> None:
        if name in self.params:
            raise ModelError(f"duplicate parameter name {name}")
        self.params[name] = Parameter(value, name, group)

    # He-uniform weights keep pre-activations on the scale of the firing threshold;
    # biases are uniform in +-1/sqrt(fan_in).
    def _conv(self, name, cin, cout, k, group, rng):
        fan_in = cin * k * k
        self._add(f"{name}.weight", rng.uniform(-1, 1, (cout, cin, k, k)) * np.sqrt(6 / fan_in), group)
        self._add(f"{name}.bias", rng.uniform(-1, 1, cout) / np.sqrt(fan_in), group)

    def _fc(self, name, fan_in, fan_out, rng):
        self._add(f"{name}.weight", rng.uniform(-1, 1, (fan_out, fan_in)) * np.sqrt(6 / fan_in), "temporal_fc")
        self._add(f"{name}.bias", rng.uniform(-1, 1, fan_out) / np.sqrt(fan_in), "temporal_fc")

    def set_trainable(self) -> None:
        """Mark which tensors the optimizer owns under the current copy switch."""
        for name, p in self.params.items():
            p.requires_grad = not (self.config.weight_copy and name.startswith("T.") and p.group in COPIED_GROUPS)

    def p(self, name: str) -> Parameter:
        return self.params[name]

    def trainable(self) -> list[Parameter]:
        return [p for p in self.params.values() if p.requires_grad]

    def copied_pairs(self) -> list[tuple[Parameter, Parameter]]:
        pairs = []
        for name, p in self.params.items():
            if name.startswith("S.") and p.group in COPIED_GROUPS:
                q = self.params.get("T." + name[2:])
                if q is None or q.shape != p.shape or q.group != p.group:
                    raise ModelError(f"temporal counterpart of {name} missing or mismatched")
                pairs.append((p, q))
        return pairs

    def train(self, mode: bool = True) -> "SeenModel":
        self.training = mode
        return self

    def eval(self) -> "SeenModel":
        return self.train(False)

    # blocks ---------------------------------------------------------------------

    def _conv_apply(self, x, name, stride=1):
        return ad.conv2d(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"], stride=stride)

    def upsilon(self, branch_out: Tensor, side: str, k: int) -> Tensor:
        """Branch score: pool -> 1x1 conv -> BN+ReLU -> 1x1 conv to one scalar per sample."""
        self.upsilon_calls[side] += 1
        att = f"{side}.omega.att{k}"
        h = self._conv_apply(ad.adaptive_avg_pool(branch_out), f"{att}.fc1")
        h = ad.batchnorm_relu(h, self.params[f"{att}.bn.scale"], self.params[f"{att}.bn.shift"],
                              self.bn[f"{att}.bn"], self.training)
        score = self._conv_apply(h, f"{att}.fc2")
        return ad.reshape(score, (score.shape[0], 1))

    def multiscale_attention(self, x, side: str = "S", omega: Tensor | None = None):
        """Attention-weighted multiscale branches fused by a 1x1 conv.

        Returns ``(features, omega)`` where ``omega`` has shape (N, branches).
        A supplied ``omega`` is used as is and the scoring layers are skipped.
        """
        x = ad.as_tensor(x)
        kernels = self.config.branch_kernels
        if x.shape[1] != self.config.event_channels:
            raise ad.ShapeError(f"attention block expects {self.config.event_channels} channels, got {x.shape}")
        if omega is not None and (omega.ndim != 2 or omega.shape[1] != len(kernels)):
            raise ModelError(f"omega must have shape (N, {len(kernels)}), got {omega.shape}")
        if omega is not None and ad.recording() is None:
            return self._collapsed_apply(x, self.collapse_attention(side, omega)), omega
        branches = [self._conv_apply(x, f"{side}.omega.branch{k}") for k in kernels]
        if omega is None:
            scores = ad.concat([self.upsilon(b, side, k) for b, k in zip(branches, kernels)], axis=1)
            omega = ad.softmax(scores, axis=1)
        n = x.shape[0]
        scaled = [ad.mul(b, ad.reshape(omega[:, i], (n, 1, 1, 1))) for i, b in enumerate(branches)]
        fused = self._conv_apply(ad.concat(scaled, axis=1), f"{side}.omega.fuse")
        return fused, omega

    def collapse_attention(self, side: str, omega: Tensor) -> tuple[np.ndarray, np.ndarray]:
        """Fold the block into per-sample kernels for a fixed ``omega``.

        Branch convs, the omega scaling and the 1x1 fusion are all linear, so
        for each sample they reduce to one conv with the largest kernel size.
        Returns kernels (N, Cout, Cin, k, k) and biases (N, Cout).
        """
        cfg = self.config
        kmax = max(cfg.branch_kernels)
        fuse_w = self.params[f"{side}.omega.fuse.weight"].data[:, :, 0, 0]
        cb = cfg.branch_channels
        kernels, biases = [], []
        for i, k in enumerate(cfg.branch_kernels):
            w = self.params[f"{side}.omega.branch{k}.weight"].data
            f = fuse_w[:, i * cb : (i + 1) * cb]
            off = (kmax - k) // 2
            padded = np.zeros((f.shape[0], w.shape[1], kmax, kmax))
            padded[:, :, off : off + k, off : off + k] = np.tensordot(f, w, axes=1)
            kernels.append(padded)
            biases.append(f @ self.params[f"{side}.omega.branch{k}.bias"].data)
        om = omega.data
        return (np.tensordot(om, np.stack(kernels), axes=1),
                om @ np.stack(biases) + self.params[f"{side}.omega.fuse.bias"].data)

    @staticmethod
    def _collapsed_apply(x: Tensor, collapsed: tuple[np.ndarray, np.ndarray]) -> Tensor:
        kernels, biases = collapsed
        with ad.no_grad():
            outs = [ad.conv2d(Tensor(x.data[j : j + 1]), Tensor(kernels[j]), Tensor(biases[j])).data
                    for j in range(x.shape[0])]
        return Tensor(outs[0] if len(outs) == 1 else np.concatenate(outs))

    # forward -----------------------------------------------------------------------

    def _check_frames(self, a: np.ndarray) -> np.ndarray:
        a = np.asarray(a, dtype=np.float64)
        if a.ndim == 2:
            a = a[None, None]
        elif a.ndim == 3:
            a = a[:, None]
        if a.shape[2:] != (self.config.input_h, self.config.input_w):
            raise ModelError(
                f"frame resolution {a.shape[2:]} does not match model "
                f"{(self.config.input_h, self.config.input_w)}"
            )
        return a

    def spatial_forward(self, i1, in_) -> SpatialOutput:
        cfg = self.config
        pair = Tensor(np.concatenate([self._check_frames(i1), self._check_frames(in_)], axis=1))
        l_s = self._conv_apply(pair, "S.ls")
        feat, omega = self.multiscale_attention(l_s, "S")
        f_s = self._conv_apply(self._conv_apply(feat, "S.conv1", cfg.conv_strides[0]), "S.conv2", cfg.conv_strides[1])
        j_s, _ = lif_step(LifState(), f_s, cfg.lif, cfg.surrogate_width)
        return SpatialOutput(J_s=j_s, omega=omega, F_s=f_s)

    def temporal_step(self, e_t, j_s: Tensor, omega: Tensor | None, states: dict[str, LifState],
                      collapsed: tuple[np.ndarray, np.ndarray] | None = None):
        """One event frame through T. Returns ``(O_t, output_spikes, omega_used, new_states)``.

        ``collapsed`` optionally carries :meth:`collapse_attention` output for
        ``omega`` so that it is not rebuilt at every step.
        """
        cfg = self.config
        e_t = np.asarray(e_t, dtype=np.float64)
        if e_t.ndim == 3:
            e_t = e_t[None]
        lif, a = cfg.lif, cfg.surrogate_width
        frozen = ad.no_grad() if cfg.weight_copy else contextlib.nullcontext()
        new = dict(states)
        with frozen:
            # the copied attention weights are constants inside T
            given = Tensor(omega.data) if (cfg.attention_copy and omega is not None) else None
            if cfg.attention_copy and given is None:
                raise ModelError("attention copy is on but no omega from the spatial extractor was given")
            if collapsed is not None and given is not None and ad.recording() is None:
                feat, omega_used = self._collapsed_apply(Tensor(e_t), collapsed), given
            else:
                feat, omega_used = self.multiscale_attention(Tensor(e_t), "T", given)
            s, new["omega"] = lif_step(states["omega"], feat, lif, a)
            s, new["conv1"] = lif_step(states["conv1"], self._conv_apply(s, "T.conv1", cfg.conv_strides[0]), lif, a)
            f_e = self._conv_apply(s, "T.conv2", cfg.conv_strides[1])
            j_e, new["fe"] = lif_step(states["fe"], f_e, lif, a)
        if j_e.shape != j_s.shape:
            raise ad.ShapeError(f"temporal spikes {j_e.shape} and spatial spikes {j_s.shape} differ")
        j_c = ad.add(j_e, j_s)
        h = ad.linear(ad.flatten(j_c), self.params["T.fc1.weight"], self.params["T.fc1.bias"])
        s, new["fc1"] = lif_step(states["fc1"], h, lif, a)
        o = ad.linear(s, self.params["T.fc2.weight"], self.params["T.fc2.bias"])
        out_spikes, new["fc2"] = lif_step(states["fc2"], o, lif, a)
        return membrane_readout(new["fc2"]), out_spikes, omega_used, new

    def _lif_over_time(self, x: np.ndarray) -> np.ndarray:
        """Spikes of one LIF layer fed the (T, ...) input sequence ``x``."""
        state, out = LifState(), np.empty_like(x)
        for t in range(len(x)):
            s, state = lif_step(state, Tensor(x[t]), self.config.lif, self.config.surrogate_width)
            out[t] = s.data
        return out

    def _temporal_layer_major(self, events: list, j_s: Tensor, collapsed: tuple[np.ndarray, np.ndarray]):
        """All temporal steps, one layer at a time.

        A LIF layer's recurrence only sees its own input sequence, so while the
        conv stack is constant (copied weights, or no tape) running it
        layer-major gives the same values as :meth:`temporal_step` with fewer,
        larger matmuls. Returns the per-step potentials and spikes of the head.
        """
        cfg = self.config
        ev = np.stack([np.asarray(e, dtype=np.float64).reshape((-1,) + np.shape(e)[-3:]) for e in events], axis=1)
        n, steps = ev.shape[:2]
        kernels, biases = collapsed
        with ad.no_grad():
            feat = np.stack([ad.conv2d(Tensor(ev[j]), Tensor(kernels[j]), Tensor(biases[j])).data for j in range(n)],
                            axis=1)  # (T, N, C, H, W)
            s = self._lif_over_time(feat)
            for name, stride in (("T.conv1", cfg.conv_strides[0]), ("T.conv2", cfg.conv_strides[1])):
                h = self._conv_apply(Tensor(s.reshape((steps * n,) + s.shape[2:])), name, stride).data
                s = self._lif_over_time(h.reshape((steps, n) + h.shape[1:]))
        if s.shape[1:] != j_s.shape:
            raise ad.ShapeError(f"temporal spikes {s.shape[1:]} and spatial spikes {j_s.shape} differ")
        j_c = ad.concat([ad.flatten(ad.add(Tensor(s[t]), j_s)) for t in range(steps)], axis=0)
        h = ad.linear(j_c, self.params["T.fc1.weight"], self.params["T.fc1.bias"])
        fc1, fc2 = LifState(), LifState()
        outs, spikes = [], []
        for t in range(steps):
            x, fc1 = lif_step(fc1, ad.getitem(h, slice(t * n, (t + 1) * n)), cfg.lif, cfg.surrogate_width)
            o = ad.linear(x, self.params["T.fc2.weight"], self.params["T.fc2.bias"])
            out_spikes, fc2 = lif_step(fc2, o, cfg.lif, cfg.surrogate_width)
            outs.append(membrane_readout(fc2))
            spikes.append(out_spikes)
        return outs, spikes

    def forward_sequence(self, i1, in_, events: Sequence) -> EmotionScores:
        """Spatial pass once, temporal steps in time order, then the configured readout and softmax."""
        if len(events) == 0:
            raise ModelError("forward_sequence needs at least one event frame")
        events = [e.channels if hasattr(e, "channels") else e for e in events]
        sp = self.spatial_forward(i1, in_)
        collapsed = None
        if self.config.attention_copy and (self.config.weight_copy or ad.recording() is None):
            collapsed = self.collapse_attention("T", sp.omega)
        if collapsed is not None:
            outs, spikes = self._temporal_layer_major(events, sp.J_s, collapsed)
            used = [Tensor(sp.omega.data) for _ in events]
        else:
            states = fresh_temporal_states()
            outs, spikes, used = [], [], []
            for e in events:
                o, s, om, states = self.temporal_step(e, sp.J_s, sp.omega, states, collapsed)
                outs.append(o)
                spikes.append(s)
                used.append(om)
        mode = self.config.output_mode
        if mode == "mean_potential":
            logits = ad.stack_mean(outs)
        elif mode == "last_potential":
            logits = outs[-1]
        elif mode == "last_spike":
            logits = spikes[-1]
        else:
            logits = ad.stack_mean(spikes)
        return EmotionScores(O_t=outs, spikes=spikes, logits=logits, R=ad.softmax(logits, axis=1),
                             omega=sp.omega, omega_used=used)

    __call__ = forward_sequence

    # weight copy --------------------------------------------------------------------

    def copy_weights(self, optimizer=None) -> None:
        """Overwrite T's shared conv and attention tensors with S's values."""
        for src, dst in self.copied_pairs():
            dst.data = src.data.copy()
            if optimizer is not None:
                optimizer.forget(dst.name)

    # state --------------------------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"param/{n}": p.data for n, p in self.params.items()}
        for n, s in self.bn.items():
            out[f"bn/{n}/running_mean"] = s.running_mean
            out[f"bn/{n}/running_var"] = s.running_var
        return out


def save_checkpoint(model: SeenModel, path, extra: dict | None = None) -> None:
    """Write a versioned .npz holding every named tensor, BN statistics and the config."""
    meta = {"version": CHECKPOINT_VERSION, "config": model.config.to_dict(), "extra": extra or {}}
    arrays = dict(model.state_arrays())
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> SeenModel:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(z["__meta__"].tobytes().decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ModelError(f"unsupported checkpoint version {meta.get('version')}")
        model = SeenModel(ModelConfig.from_dict(meta["config"]))
        for name, p in model.params.items():
            arr = z[f"param/{name}"]
            if arr.shape != p.shape:
                raise ModelError(f"checkpoint tensor {name} has shape {arr.shape}, expected {p.shape}")
            p.data = arr.astype(np.float64)
        for name, s in model.bn.items():
            s.running_mean = z[f"bn/{name}/running_mean"].astype(np.float64)
            s.running_var = z[f"bn/{name}/running_var"].astype(np.float64)
    return model


def checkpoint_meta(path) -> dict:
    with np.load(path, allow_pickle=False) as z:
        return json.loads(z["__meta__"].tobytes().decode())
