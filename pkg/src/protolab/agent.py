"""The recurrent policy network played by both roles.

Input is the concatenation (own last message one-hot, other's last
message, observation bits). It feeds a 128-unit dense layer, a 64-unit
LSTM (tanh candidate, sigmoid gates), and a linear readout of width
n_classes + vocab. The first n_classes outputs are softmaxed into the
class prediction; the rest are returned raw as the utterance.

The dense layer's activation is switchable between relu and linear;
with linear the map into the LSTM is affine, which changes what kind
of protocol conventions the network tends to settle on.

Checkpoints are a small binary format: magic "PROTOLAB1", a version
byte, five little-endian u32 dims (vocab, n_classes, obs_bits,
dense_units, lstm_units), an activation byte, the parameter tensors as
little-endian float32 in declared order, then a length-prefixed UTF-8
JSON metadata blob. Declared parameter order: w_in, b_in, w_x, w_h,
b_gates, w_out, b_out; LSTM gate blocks are [input, forget, candidate,
output].
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ARRAY_OPS
from .errors import CheckpointError, ConfigurationError

CHECKPOINT_MAGIC = b"PROTOLAB1"
CHECKPOINT_VERSION = 1

ACTIVATIONS = ("relu", "linear")


@dataclass(frozen=True)
class AgentConfig:
    vocab: int = 5
    n_classes: int = 3
    obs_bits: int = 2
    dense_units: int = 128
    lstm_units: int = 64
    activation: str = "relu"

    def validate(self):
        if self.vocab < 2:
            raise ConfigurationError(f"vocab must be >= 2, got {self.vocab}")
        if self.n_classes < 2:
            raise ConfigurationError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.obs_bits < 1 or self.dense_units < 1 or self.lstm_units < 1:
            raise ConfigurationError("layer sizes must be positive")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"activation must be one of {ACTIVATIONS}, "
                                     f"got {self.activation!r}")
        return self

    @property
    def input_width(self):
        return 2 * self.vocab + self.obs_bits

    @property
    def output_width(self):
        return self.n_classes + self.vocab


PARAM_ORDER = ("w_in", "b_in", "w_x", "w_h", "b_gates", "w_out", "b_out")


@dataclass
class PolicyParams:
    """All trainable arrays, float32."""

    config: AgentConfig
    w_in: np.ndarray
    b_in: np.ndarray
    w_x: np.ndarray
    w_h: np.ndarray
    b_gates: np.ndarray
    w_out: np.ndarray
    b_out: np.ndarray

    def named(self):
        return {name: getattr(self, name) for name in PARAM_ORDER}

    def copy(self):
        arrays = {n: a.copy() for n, a in self.named().items()}
        return PolicyParams(config=self.config, **arrays)

    def n_weights(self):
        return sum(a.size for a in self.named().values())


def _glorot(rng, fan_in, fan_out, shape):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def init_params(config: AgentConfig, rng: np.random.Generator) -> PolicyParams:
    """Glorot-uniform weights, zero biases, forget-gate bias 1.0."""
    config.validate()
    i, d, u, o = config.input_width, config.dense_units, config.lstm_units, config.output_width
    b_gates = np.zeros(4 * u, dtype=np.float32)
    b_gates[u:2 * u] = 1.0
    return PolicyParams(
        config=config,
        w_in=_glorot(rng, i, d, (i, d)),
        b_in=np.zeros(d, dtype=np.float32),
        w_x=_glorot(rng, d, 4 * u, (d, 4 * u)),
        w_h=_glorot(rng, u, 4 * u, (u, 4 * u)),
        b_gates=b_gates,
        w_out=_glorot(rng, u, o, (u, o)),
        b_out=np.zeros(o, dtype=np.float32),
    )


def zero_params(config: AgentConfig) -> PolicyParams:
    """All-zero parameters; handy for degenerate-output checks."""
    config.validate()
    i, d, u, o = config.input_width, config.dense_units, config.lstm_units, config.output_width
    z = lambda *s: np.zeros(s, dtype=np.float32)
    return PolicyParams(config=config, w_in=z(i, d), b_in=z(d), w_x=z(d, 4 * u),
                        w_h=z(u, 4 * u), b_gates=z(4 * u), w_out=z(u, o), b_out=z(o))


@dataclass
class MentalState:
    """LSTM carry for one role in one episode."""

    h: np.ndarray
    c: np.ndarray


def initial_state(config: AgentConfig) -> MentalState:
    u = config.lstm_units
    return MentalState(h=np.zeros(u, dtype=np.float32), c=np.zeros(u, dtype=np.float32))


@dataclass
class AgentAction:
    utterance: np.ndarray
    prediction: np.ndarray


def first_layer_output(params, concat_input):
    """Dense-layer output before the LSTM, for probing the input map."""
    x = np.atleast_2d(np.asarray(concat_input, dtype=np.float32))
    y = x @ params.w_in + params.b_in
    if params.config.activation == "relu":
        y = np.maximum(y, 0.0)
    return y


def policy_forward(params, ops, own_last, other_last, obs, h, c):
    """One network step, written once for both backends.

    params may hold Tensors (tape training) or ndarrays (inference).
    All inputs are 2-D batches. Returns (utterance, prediction, h, c).
    """
    cfg = params.config
    u = cfg.lstm_units
    x = ops.concat([own_last, other_last, obs])
    x = ops.add(ops.matmul(x, params.w_in), params.b_in)
    if cfg.activation == "relu":
        x = ops.relu(x)
    z = ops.add(ops.add(ops.matmul(x, params.w_x), ops.matmul(h, params.w_h)),
                params.b_gates)
    gate_i = ops.sigmoid(ops.slice_cols(z, 0, u))
    gate_f = ops.sigmoid(ops.slice_cols(z, u, 2 * u))
    cand = ops.tanh(ops.slice_cols(z, 2 * u, 3 * u))
    gate_o = ops.sigmoid(ops.slice_cols(z, 3 * u, 4 * u))
    c2 = ops.add(ops.mul(gate_f, c), ops.mul(gate_i, cand))
    h2 = ops.mul(gate_o, ops.tanh(c2))
    out = ops.add(ops.matmul(h2, params.w_out), params.b_out)
    prediction = ops.softmax(ops.slice_cols(out, 0, cfg.n_classes))
    utterance = ops.slice_cols(out, cfg.n_classes, cfg.output_width)
    return utterance, prediction, h2, c2


def act(params: PolicyParams, state: MentalState, own_last, other_last, observation):
    """Single-episode step with plain arrays; never mutates its inputs."""
    cfg = params.config
    own = np.asarray(own_last, dtype=np.float32).reshape(1, cfg.vocab)
    other = np.asarray(other_last, dtype=np.float32).reshape(1, cfg.vocab)
    obs = np.asarray(observation, dtype=np.float32).reshape(1, cfg.obs_bits)
    utt, pred, h2, c2 = policy_forward(params, ARRAY_OPS, own, other, obs,
                                       state.h.reshape(1, -1), state.c.reshape(1, -1))
    action = AgentAction(utterance=utt[0].copy(), prediction=pred[0].copy())
    return action, MentalState(h=h2[0], c=c2[0])


def act_batch(params: PolicyParams, h, c, own_last, other_last, obs):
    """Batched inference step; returns (utterance, prediction, h, c)."""
    return policy_forward(params, ARRAY_OPS, own_last, other_last, obs, h, c)


@dataclass
class BoundParams:
    """PolicyParams re-expressed as tape leaves for one training step."""

    config: AgentConfig
    w_in: object
    b_in: object
    w_x: object
    w_h: object
    b_gates: object
    w_out: object
    b_out: object
    leaves: dict = field(default_factory=dict)


def bind_params(tape, params: PolicyParams) -> BoundParams:
    leaves = {name: tape.leaf(arr, name=name) for name, arr in params.named().items()}
    return BoundParams(config=params.config, leaves=leaves, **leaves)


def _meta_bytes(metadata: dict) -> bytes:
    return json.dumps(metadata, sort_keys=True, separators=(",", ":")).encode("utf-8")


def checkpoint_bytes(params: PolicyParams, metadata: dict | None = None) -> bytes:
    """Serialize params plus metadata to the binary checkpoint format."""
    cfg = params.config
    head = [CHECKPOINT_MAGIC, bytes([CHECKPOINT_VERSION])]
    head.append(struct.pack("<5I", cfg.vocab, cfg.n_classes, cfg.obs_bits,
                            cfg.dense_units, cfg.lstm_units))
    head.append(bytes([ACTIVATIONS.index(cfg.activation)]))
    body = [np.ascontiguousarray(params.named()[n], dtype="<f4").tobytes()
            for n in PARAM_ORDER]
    meta = _meta_bytes(metadata or {})
    return b"".join(head) + b"".join(body) + struct.pack("<I", len(meta)) + meta


def save_checkpoint(params: PolicyParams, path, metadata: dict | None = None):
    blob = checkpoint_bytes(params, metadata)
    with open(path, "wb") as fh:
        fh.write(blob)
    return blob


def _expected_shapes(cfg: AgentConfig):
    i, d, u, o = cfg.input_width, cfg.dense_units, cfg.lstm_units, cfg.output_width
    return {"w_in": (i, d), "b_in": (d,), "w_x": (d, 4 * u), "w_h": (u, 4 * u),
            "b_gates": (4 * u,), "w_out": (u, o), "b_out": (o,)}


def load_checkpoint_bytes(blob: bytes, expected: AgentConfig | None = None):
    """Parse checkpoint bytes; returns (PolicyParams, metadata dict)."""
    if len(blob) < len(CHECKPOINT_MAGIC) + 2 + 20:
        raise CheckpointError("checkpoint too short for its header")
    if blob[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic; not a checkpoint file")
    pos = len(CHECKPOINT_MAGIC)
    version = blob[pos]
    pos += 1
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    vocab, n_classes, obs_bits, dense_units, lstm_units = struct.unpack_from("<5I", blob, pos)
    pos += 20
    act_byte = blob[pos]
    pos += 1
    if act_byte >= len(ACTIVATIONS):
        raise CheckpointError(f"unknown activation code {act_byte}")
    cfg = AgentConfig(vocab=vocab, n_classes=n_classes, obs_bits=obs_bits,
                      dense_units=dense_units, lstm_units=lstm_units,
                      activation=ACTIVATIONS[act_byte])
    if expected is not None and cfg != expected:
        raise CheckpointError(f"checkpoint dims {cfg} do not match expected {expected}")
    arrays = {}
    for name, shape in _expected_shapes(cfg).items():
        count = int(np.prod(shape))
        nbytes = 4 * count
        if pos + nbytes > len(blob):
            raise CheckpointError(f"checkpoint truncated inside tensor {name!r}")
        arrays[name] = np.frombuffer(blob, dtype="<f4", count=count,
                                     offset=pos).reshape(shape).astype(np.float32)
        pos += nbytes
    if pos + 4 > len(blob):
        raise CheckpointError("checkpoint truncated before metadata length")
    (meta_len,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    if pos + meta_len != len(blob):
        raise CheckpointError("checkpoint metadata length does not match file size")
    try:
        metadata = json.loads(blob[pos:pos + meta_len].decode("utf-8")) if meta_len else {}
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"checkpoint metadata unreadable: {exc}") from exc
    return PolicyParams(config=cfg, **arrays), metadata


def load_checkpoint(path, expected: AgentConfig | None = None):
    with open(path, "rb") as fh:
        blob = fh.read()
    return load_checkpoint_bytes(blob, expected=expected)
