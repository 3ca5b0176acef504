"""The assembled codec: framer, causal encoder stack, residual quantizer,
causal decoder stack, de-framer, plus streaming sessions and checkpoints.

Offline `encode` and `decode` run the streaming path internally, one frame at
a time, so any chunking of the input produces bit-identical codes and the
public API inherits the zero-lookahead guarantee instead of approximating it.
The dense batched forward used for training lives in the training module.
"""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nnet, rvq
from .autodiff import Tensor

CHECKPOINT_MAGIC = b"JHCK"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class CodecConfig:
    sample_rate: int = 16000
    frame_size: int = 320
    model_dim: int = 1024
    num_layers: int = 8  # per stack; encoder and decoder each get this many
    window: int = 16
    num_quantizers: int = 8
    codebook_size: int = 1024
    code_dim: int = 16
    ffn_dim: int = 4096
    heads: int = 16
    framer_hidden: int = 768
    style: str = "dac"
    mel_weight: float = 0.1
    vq_weight: float = 1.0
    commit_weight: float = 0.1
    ssrr_weight: float = 0.0
    mask_rate: float = 0.10
    noise_prob: float = 0.10
    rotary_base: float = 10000.0
    layerscale_init: float = 1e-2

    def __post_init__(self):
        if self.codebook_size < 2 or self.codebook_size & (self.codebook_size - 1):
            raise ValueError("codebook_size must be a power of two for bit-packing")
        if self.sample_rate % self.frame_size:
            raise ValueError("frame_size must divide sample_rate for an integer frame rate")
        if self.model_dim % self.heads or (self.model_dim // self.heads) % 2:
            raise ValueError("model_dim must split into heads of even dimension")
        if self.code_dim >= self.model_dim:
            raise ValueError("code_dim must be below model_dim")
        if self.style not in rvq.STYLES:
            raise ValueError(f"style must be one of {rvq.STYLES}")
        if not 0.0 <= self.mask_rate <= 1.0 or not 0.0 <= self.noise_prob <= 1.0:
            raise ValueError("rates are probabilities")

    @property
    def frame_rate(self) -> int:
        return self.sample_rate // self.frame_size

    @property
    def bits_per_index(self) -> int:
        return int(self.codebook_size).bit_length() - 1

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            lines.append(f"{f.name}={getattr(self, f.name)}")
        return "\n".join(lines)

    @classmethod
    def from_text(cls, text: str) -> "CodecConfig":
        kinds = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            name, _, value = line.partition("=")
            if name not in kinds:
                raise CheckpointError(f"unknown config key {name!r}")
            kind = kinds[name]
            kwargs[name] = value if "str" in kind else (int(value) if "int" in kind else float(value))
        return cls(**kwargs)


def full_config(**overrides) -> CodecConfig:
    return CodecConfig(**overrides)


def toy_config(**overrides) -> CodecConfig:
    base = dict(
        frame_size=64,
        model_dim=32,
        num_layers=2,
        window=8,
        num_quantizers=4,
        codebook_size=64,
        code_dim=8,
        # Wide MLPs cost almost nothing at this scale (per-step time is
        # op-count bound, not width bound) and reconstruction quality is
        # capped by them, so the toy preset keeps them generous.
        ffn_dim=256,
        heads=4,
        framer_hidden=320,
    )
    base.update(overrides)
    return CodecConfig(**base)


@dataclass
class CodecParams:
    framer: nnet.FramerParams
    encoder: list[nnet.BlockParams]
    enc_mask: Tensor
    quantizer: rvq.QuantizerState
    dec_mask: Tensor
    decoder: list[nnet.BlockParams]
    deframer: nnet.FramerParams

    def parameters(self) -> list[Tensor]:
        out = list(self.framer.parameters())
        for b in self.encoder:
            out.extend(b.parameters())
        out.append(self.enc_mask)
        out.extend(self.quantizer.parameters())
        out.append(self.dec_mask)
        for b in self.decoder:
            out.extend(b.parameters())
        out.extend(self.deframer.parameters())
        return out


def make_codec(config: CodecConfig, seed: int = 0) -> CodecParams:
    rng = np.random.default_rng(seed)
    blocks = lambda: [
        nnet.make_block(config.model_dim, config.ffn_dim, config.heads, rng, config.layerscale_init)
        for _ in range(config.num_layers)
    ]
    return CodecParams(
        framer=nnet.make_framer(config.frame_size, config.framer_hidden, config.model_dim, rng),
        encoder=blocks(),
        enc_mask=Tensor(rng.uniform(-0.1, 0.1, config.model_dim), requires_grad=True),
        quantizer=rvq.make_quantizer(
            config.model_dim, config.code_dim, config.codebook_size,
            config.num_quantizers, config.style, rng,
        ),
        dec_mask=Tensor(rng.uniform(-0.1, 0.1, config.model_dim), requires_grad=True),
        decoder=blocks(),
        deframer=nnet.make_framer(config.model_dim, config.framer_hidden, config.frame_size, rng),
    )


# -- code grids ---------------------------------------------------------


@dataclass
class CodeGrid:
    """Quantizer indices for a clip: one row per frame, one column per level."""

    indices: np.ndarray  # (F, k) ints in [0, codebook_size)
    frame_rate: int
    pad_samples: int = 0  # zeros appended to fill the last frame at encode time

    def __post_init__(self):
        self.indices = np.asarray(self.indices)
        if self.indices.ndim != 2:
            raise ValueError("indices must be frames x levels")

    @property
    def frames(self) -> int:
        return self.indices.shape[0]

    @property
    def k(self) -> int:
        return self.indices.shape[1]


def truncate_grid(grid: CodeGrid, k: int) -> CodeGrid:
    if not 1 <= k <= grid.k:
        raise ValueError(f"cannot truncate {grid.k}-level grid to k={k}")
    return CodeGrid(grid.indices[:, :k].copy(), grid.frame_rate, grid.pad_samples)


# -- streaming sessions --------------------------------------------------


@dataclass
class StreamState:
    config: CodecConfig
    params: CodecParams
    k: int
    enc_caches: list[nnet.LayerCache]
    dec_caches: list[nnet.LayerCache]
    buffer: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.float32))
    frames_emitted: int = 0
    closed: bool = False


def open_stream(config: CodecConfig, params: CodecParams, k: int | None = None) -> StreamState:
    k = config.num_quantizers if k is None else k
    if not 1 <= k <= config.num_quantizers:
        raise ValueError(f"k={k} outside [1, {config.num_quantizers}]")
    return StreamState(
        config=config,
        params=params,
        k=k,
        enc_caches=[nnet.make_cache(config.model_dim) for _ in params.encoder],
        dec_caches=[nnet.make_cache(config.model_dim) for _ in params.decoder],
    )


def close_stream(state: StreamState) -> None:
    state.closed = True


def _check_open(state: StreamState) -> None:
    if state.closed:
        raise RuntimeError("stream session is closed")


def _encode_frame(state: StreamState, frame: np.ndarray) -> np.ndarray:
    cfg, p = state.config, state.params
    emb = nnet.frame_step(frame, p.framer)
    z_e = nnet.stack_step(p.encoder, emb, state.enc_caches, cfg.window, cfg.heads, cfg.rotary_base)
    with ad.no_grad():
        out = rvq.rvq_quantize(p.quantizer, Tensor(z_e[None]), state.k)
    return out.indices[0]


def stream_encode_chunk(state: StreamState, samples: np.ndarray) -> CodeGrid:
    """Consume samples, emit every completed frame, buffer the remainder."""
    _check_open(state)
    samples = np.asarray(samples, dtype=np.float32).reshape(-1)
    data = np.concatenate([state.buffer, samples])
    n = state.config.frame_size
    rows = []
    while data.shape[0] >= n:
        rows.append(_encode_frame(state, data[:n]))
        data = data[n:]
        state.frames_emitted += 1
    state.buffer = data
    idx = np.stack(rows) if rows else np.zeros((0, state.k), dtype=np.int64)
    return CodeGrid(idx, state.config.frame_rate)


def stream_decode_chunk(state: StreamState, indices: np.ndarray) -> np.ndarray:
    """Decode frames immediately: each index row yields frame_size samples."""
    _check_open(state)
    cfg, p = state.config, state.params
    indices = np.asarray(indices)
    if indices.ndim == 1:
        indices = indices[None]
    out = np.zeros(indices.shape[0] * cfg.frame_size, dtype=np.float32)
    for i, row in enumerate(indices):
        z = rvq.decode_codes(p.quantizer, row[None])[0]
        h = nnet.stack_step(p.decoder, z, state.dec_caches, cfg.window, cfg.heads, cfg.rotary_base)
        out[i * cfg.frame_size : (i + 1) * cfg.frame_size] = nnet.deframe_step(h, p.deframer)
    return np.clip(out, -1.0, 1.0)


# -- offline entry points -------------------------------------------------


def encode(config: CodecConfig, params: CodecParams, samples, k: int | None = None) -> CodeGrid:
    """Whole-clip encode; a trailing partial frame is zero-padded and the pad
    length recorded on the grid so decode-side consumers can trim it."""
    samples = np.asarray(samples, dtype=np.float32).reshape(-1)
    if samples.size == 0:
        raise ValueError("empty input")
    n = config.frame_size
    pad = (-samples.size) % n
    if pad:
        samples = np.concatenate([samples, np.zeros(pad, dtype=np.float32)])
    state = open_stream(config, params, k)
    grid = stream_encode_chunk(state, samples)
    close_stream(state)
    return CodeGrid(grid.indices, grid.frame_rate, pad_samples=pad)


def decode(config: CodecConfig, params: CodecParams, grid: CodeGrid) -> np.ndarray:
    """Whole-grid decode to exactly frames x frame_size samples in [-1, 1]."""
    if grid.indices.size and grid.indices.max() >= config.codebook_size:
        raise ValueError("grid index outside the codebook")
    state = open_stream(config, params, grid.k)
    out = stream_decode_chunk(state, grid.indices)
    close_stream(state)
    return out


# -- training-time input corruption ---------------------------------------


def apply_input_noise(samples: np.ndarray, rng: np.random.Generator, config: CodecConfig) -> np.ndarray:
    """With probability noise_prob, overlay Gaussian noise or a random tone at
    20-40 dB SNR; the caller keeps the clean signal as the training target."""
    samples = np.asarray(samples, dtype=np.float32)
    if rng.random() >= config.noise_prob:
        return samples
    power = float((samples.astype(np.float64) ** 2).mean())
    if power == 0.0:
        return samples
    snr_db = rng.uniform(20.0, 40.0)
    noise_power = power / (10.0 ** (snr_db / 10.0))
    if rng.random() < 0.5:
        noise = rng.normal(0.0, np.sqrt(noise_power), samples.shape)
    else:
        freq = rng.uniform(50.0, 7000.0)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        t = np.arange(samples.shape[-1]) / config.sample_rate
        amp = np.sqrt(2.0 * noise_power)
        noise = amp * np.sin(2.0 * np.pi * freq * t + phase)
        noise = np.broadcast_to(noise, samples.shape)
    return (samples + noise).astype(np.float32)


def apply_masking(embeddings: Tensor, rate: float, mask_token: Tensor, rng: np.random.Generator) -> Tensor:
    """Independently replace each frame embedding by the learned mask token."""
    if rate <= 0.0:
        return embeddings
    lead = embeddings.shape[:-1]
    picks = (rng.random(lead) < rate).astype(np.float32)[..., None]
    keep = Tensor(1.0 - picks)
    swap = Tensor(picks)
    return embeddings * keep + mask_token * swap


# -- checkpoint serialization ---------------------------------------------


def named_tensors(params: CodecParams) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for side, framer in (("framer", params.framer), ("deframer", params.deframer)):
        for name in ("proj1", "bias1", "proj2", "bias2"):
            out[f"{side}.{name}"] = getattr(framer, name).data
    block_fields = [f.name for f in dataclasses.fields(nnet.BlockParams)]
    for side, blocks in (("enc", params.encoder), ("dec", params.decoder)):
        for i, b in enumerate(blocks):
            for name in block_fields:
                out[f"{side}.{i}.{name}"] = getattr(b, name).data
    out["enc_mask"] = params.enc_mask.data
    out["dec_mask"] = params.dec_mask.data

    def level_entries(tag: str, lv: rvq.VqLevel):
        out[f"q.{tag}.w_in"] = lv.w_in.data
        out[f"q.{tag}.w_out"] = lv.w_out.data
        out[f"q.{tag}.codebook"] = lv.codebook.data
        out[f"q.{tag}.ema_usage"] = lv.ema_usage.astype(np.float32)

    if params.quantizer.semantic_level is not None:
        level_entries("sem", params.quantizer.semantic_level)
    for i, lv in enumerate(params.quantizer.levels):
        level_entries(str(i), lv)
    return out


def write_sections(fh, tensors: dict[str, np.ndarray]) -> None:
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        encoded = name.encode("utf-8")
        fh.write(struct.pack("<H", len(encoded)))
        fh.write(encoded)
        fh.write(struct.pack("<B", arr.ndim))
        for extent in arr.shape:
            fh.write(struct.pack("<I", extent))
        fh.write(arr.tobytes())


def read_sections(fh) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    while True:
        head = fh.read(2)
        if not head:
            return out
        if len(head) != 2:
            raise CheckpointError("truncated section header")
        (name_len,) = struct.unpack("<H", head)
        name = fh.read(name_len).decode("utf-8")
        rank_raw = fh.read(1)
        if len(rank_raw) != 1:
            raise CheckpointError("truncated section rank")
        rank = rank_raw[0]
        shape = []
        for _ in range(rank):
            ext = fh.read(4)
            if len(ext) != 4:
                raise CheckpointError("truncated section extents")
            shape.append(struct.unpack("<I", ext)[0])
        count = int(np.prod(shape)) if shape else 1
        raw = fh.read(4 * count)
        if len(raw) != 4 * count:
            raise CheckpointError(f"truncated tensor data for {name!r}")
        out[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()


def save_checkpoint(path, config: CodecConfig, params: CodecParams) -> None:
    blob = config.to_text().encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<H", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        write_sections(fh, named_tensors(params))


def load_checkpoint(path) -> tuple[CodecConfig, CodecParams]:
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise CheckpointError("not a codec checkpoint (bad magic)")
        (version,) = struct.unpack("<H", fh.read(2))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (blob_len,) = struct.unpack("<I", fh.read(4))
        config = CodecConfig.from_text(fh.read(blob_len).decode("utf-8"))
        sections = read_sections(fh)

    params = make_codec(config, seed=0)
    expected = named_tensors(params)
    missing = set(expected) - set(sections)
    extra = set(sections) - set(expected)
    if missing or extra:
        raise CheckpointError(f"section mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
    targets = _tensor_targets(params)
    for name, arr in sections.items():
        target = targets[name]
        if isinstance(target, Tensor):
            if tuple(arr.shape) != target.data.shape:
                raise CheckpointError(f"shape mismatch for {name!r}")
            target.data = arr.astype(np.float32)
        else:  # ema usage buffers live as float64 arrays
            holder, attr = target
            setattr(holder, attr, arr.astype(np.float64))
    return config, params


def _tensor_targets(params: CodecParams) -> dict:
    out: dict = {}
    for side, framer in (("framer", params.framer), ("deframer", params.deframer)):
        for name in ("proj1", "bias1", "proj2", "bias2"):
            out[f"{side}.{name}"] = getattr(framer, name)
    block_fields = [f.name for f in dataclasses.fields(nnet.BlockParams)]
    for side, blocks in (("enc", params.encoder), ("dec", params.decoder)):
        for i, b in enumerate(blocks):
            for name in block_fields:
                out[f"{side}.{i}.{name}"] = getattr(b, name)
    out["enc_mask"] = params.enc_mask
    out["dec_mask"] = params.dec_mask

    def level_entries(tag: str, lv: rvq.VqLevel):
        out[f"q.{tag}.w_in"] = lv.w_in
        out[f"q.{tag}.w_out"] = lv.w_out
        out[f"q.{tag}.codebook"] = lv.codebook
        out[f"q.{tag}.ema_usage"] = (lv, "ema_usage")

    if params.quantizer.semantic_level is not None:
        level_entries("sem", params.quantizer.semantic_level)
    for i, lv in enumerate(params.quantizer.levels):
        level_entries(str(i), lv)
    return out
