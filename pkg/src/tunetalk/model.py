"""Small decoder-only autoregressive transformer over the expanded vocabulary.

Pre-norm blocks with learned positional embeddings, GELU MLPs (4x width) and
an output projection tied to the token embedding table. Training is plain
next-token cross entropy under a loss mask, optimized with AdamW; everything
is seeded and deterministic on CPU. New (music + special) token embeddings
can be drawn from the running text-embedding statistics, mean and covariance,
so they start inside the occupied region of embedding space.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .sampling import MusicGrammar, SamplingParams, sample_token
from .vocab import ITEM_TOKENS, MusicTokenSeq, Vocabulary

CKPT_MAGIC = b"TPCKPT1"

_DTYPE_CODES = {torch.float32: 0, torch.float64: 1, torch.int64: 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class CheckpointError(Exception):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    context_len: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.context_len < 8:
            raise ValueError("context_len must be >= 8")
        if self.vocab_size < 1:
            raise ValueError("vocab_size must be >= 1")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 8
    epochs: int = 1
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")


class _Block(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.ln1 = nn.LayerNorm(d_model)
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.proj = nn.Linear(d_model, d_model)
        self.ln2 = nn.LayerNorm(d_model)
        self.mlp_in = nn.Linear(d_model, 4 * d_model)
        self.mlp_out = nn.Linear(4 * d_model, d_model)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, T, D = x.shape
        h = self.n_heads
        q, k, v = self.qkv(self.ln1(x)).split(D, dim=-1)
        q = q.view(B, T, h, D // h).transpose(1, 2)
        k = k.view(B, T, h, D // h).transpose(1, 2)
        v = v.view(B, T, h, D // h).transpose(1, 2)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(D // h)
        causal = torch.tril(torch.ones(T, T, dtype=torch.bool, device=x.device))
        att = att.masked_fill(~causal, float("-inf"))
        att = torch.softmax(att, dim=-1)
        out = (att @ v).transpose(1, 2).reshape(B, T, D)
        x = x + self.proj(out)
        x = x + self.mlp_out(F.gelu(self.mlp_in(self.ln2(x))))
        return x


class DecoderLM(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.tok_emb = nn.Embedding(config.vocab_size, config.d_model)
        self.pos_emb = nn.Embedding(config.context_len, config.d_model)
        self.blocks = nn.ModuleList(
            _Block(config.d_model, config.n_heads) for _ in range(config.n_layers)
        )
        self.ln_f = nn.LayerNorm(config.d_model)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        if ids.ndim == 1:
            ids = ids[None, :]
        B, T = ids.shape
        if T > self.config.context_len:
            raise ValueError(
                f"sequence length {T} exceeds context_len {self.config.context_len}"
            )
        pos = torch.arange(T, device=ids.device)
        x = self.tok_emb(ids) + self.pos_emb(pos)[None, :, :]
        for block in self.blocks:
            x = block(x)
        x = self.ln_f(x)
        # output projection tied to the embedding table
        return F.linear(x, self.tok_emb.weight)


def init_params(
    config: ModelConfig,
    base_stats: tuple | None = None,
    new_token_ids: Sequence[int] | None = None,
) -> DecoderLM:
    """Freshly initialized model, deterministic given config.seed.

    Matrix weights are N(0, 0.02), biases zero, layer norms identity. When
    *base_stats* = (mu, sigma) is given, the embedding rows listed in
    *new_token_ids* are redrawn from N(mu, sigma); sigma may be a scalar
    variance, a per-coordinate variance vector, or a full covariance matrix.
    """
    model = DecoderLM(config)
    gen = torch.Generator().manual_seed(config.seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if p.ndim >= 2:
                p.normal_(0.0, 0.02, generator=gen)
            elif name.endswith("bias"):
                p.zero_()
            else:  # layer norm weights
                p.fill_(1.0)
    if base_stats is not None:
        if new_token_ids is None:
            raise ValueError("base_stats requires new_token_ids")
        hewitt_init_(model, new_token_ids, *base_stats, generator=gen)
    return model


def hewitt_init_(
    model: DecoderLM,
    token_ids: Sequence[int],
    mu,
    sigma,
    generator: torch.Generator | None = None,
) -> None:
    """Redraw the given embedding rows from a Gaussian fit of existing rows."""
    d = model.config.d_model
    if generator is None:
        generator = torch.Generator().manual_seed(model.config.seed + 1)
    mu_t = torch.as_tensor(mu, dtype=torch.float32)
    if mu_t.ndim == 0:
        mu_t = mu_t.repeat(d)
    if mu_t.shape != (d,):
        raise ValueError(f"mu must be a scalar or length-{d} vector")
    sigma_t = torch.as_tensor(sigma, dtype=torch.float64)

    n = len(token_ids)
    z = torch.empty((n, d), dtype=torch.float32).normal_(0.0, 1.0, generator=generator)
    if sigma_t.ndim == 0 or sigma_t.ndim == 1:
        var = sigma_t if sigma_t.ndim == 1 else sigma_t.repeat(d)
        if torch.any(var < 0):
            raise ValueError("variances must be non-negative")
        draws = mu_t[None, :] + z * torch.sqrt(var).to(torch.float32)[None, :]
    elif sigma_t.ndim == 2 and sigma_t.shape == (d, d):
        evals, evecs = torch.linalg.eigh((sigma_t + sigma_t.T) / 2)
        if torch.any(evals < -1e-8):
            raise ValueError("covariance is not positive semi-definite")
        root = evecs @ torch.diag(torch.sqrt(evals.clamp(min=0.0))) @ evecs.T
        draws = mu_t[None, :] + (z.to(torch.float64) @ root.T).to(torch.float32)
    else:
        raise ValueError("sigma must be scalar, length-d variances, or d x d covariance")

    with torch.no_grad():
        model.tok_emb.weight[torch.as_tensor(list(token_ids), dtype=torch.long)] = draws


def embedding_stats(model: DecoderLM, token_ids: Sequence[int]) -> tuple:
    """Empirical (mean, per-coordinate variance) of the given embedding rows."""
    rows = model.tok_emb.weight[torch.as_tensor(list(token_ids), dtype=torch.long)]
    return rows.mean(dim=0).detach(), rows.var(dim=0, unbiased=False).detach()


# --- loss & training ---------------------------------------------------------

def _sequence_loss(
    model: DecoderLM, ids: torch.Tensor, target_mask: torch.Tensor
) -> tuple[torch.Tensor, int]:
    """Summed cross entropy over masked-in targets and the target count.

    ``target_mask[b, i]`` marks whether position i's token contributes as a
    prediction target (predicted from positions < i); index 0 never does.
    """
    logits = model(ids)
    targets = ids[:, 1:]
    mask = target_mask[:, 1:].to(logits.dtype)
    logp = F.log_softmax(logits[:, :-1, :], dim=-1)
    token_logp = logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    return -(token_logp * mask).sum(), int(mask.sum().item())


def forward_loss(
    model: DecoderLM,
    token_ids: Sequence[int],
    loss_mask: Sequence[int] | None = None,
) -> tuple[float, dict[str, torch.Tensor]]:
    """Mean masked cross entropy of one sequence plus gradients by name."""
    ids = torch.as_tensor(list(token_ids), dtype=torch.long)[None, :]
    if ids.shape[1] > model.config.context_len:
        raise ValueError(
            f"sequence length {ids.shape[1]} exceeds context_len "
            f"{model.config.context_len}"
        )
    if loss_mask is None:
        mask = torch.ones_like(ids, dtype=torch.bool)
    else:
        mask = torch.as_tensor(list(loss_mask), dtype=torch.bool)[None, :]
        if mask.shape != ids.shape:
            raise ValueError("loss_mask must have the same length as token_ids")
    if ids.shape[1] < 2 or not mask[:, 1:].any():
        return 0.0, {n: torch.zeros_like(p) for n, p in model.named_parameters()}

    model.zero_grad(set_to_none=True)
    total, count = _sequence_loss(model, ids, mask)
    loss = total / count
    loss.backward()
    grads = {
        n: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for n, p in model.named_parameters()
    }
    model.zero_grad(set_to_none=True)
    return float(loss.detach()), grads


def _pad_batch(seqs: list[torch.Tensor], masks: list[torch.Tensor]):
    T = max(len(s) for s in seqs)
    ids = torch.zeros((len(seqs), T), dtype=torch.long)
    mask = torch.zeros((len(seqs), T), dtype=torch.bool)
    for i, (s, m) in enumerate(zip(seqs, masks)):
        ids[i, : len(s)] = s
        mask[i, : len(m)] = m
    return ids, mask


def make_optimizer(model: DecoderLM, cfg: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay
    )


def train(
    model: DecoderLM,
    corpus: Sequence[tuple[Sequence[int], Sequence[int] | None]] | Sequence[Sequence[int]],
    cfg: TrainConfig,
    optimizer: torch.optim.AdamW | None = None,
    start_epoch: int = 0,
) -> tuple[list[float], torch.optim.AdamW]:
    """AdamW next-token training; returns the per-epoch mean loss curve.

    Batch order is drawn from a generator seeded by (cfg.seed, epoch), so a
    run resumed from a checkpoint at epoch e reproduces the uninterrupted one.
    """
    seqs: list[torch.Tensor] = []
    masks: list[torch.Tensor] = []
    for entry in corpus:
        if isinstance(entry, tuple) and len(entry) == 2 and not isinstance(entry[0], int):
            ids, m = entry
        else:
            ids, m = entry, None
        t = torch.as_tensor(list(ids), dtype=torch.long)
        if len(t) > model.config.context_len:
            raise ValueError(
                f"corpus sequence of length {len(t)} exceeds context_len "
                f"{model.config.context_len}"
            )
        seqs.append(t)
        masks.append(
            torch.ones(len(t), dtype=torch.bool)
            if m is None
            else torch.as_tensor(list(m), dtype=torch.bool)
        )
    if not seqs:
        raise ValueError("empty training corpus")

    if optimizer is None:
        optimizer = make_optimizer(model, cfg)
    curve: list[float] = []
    for epoch in range(start_epoch, cfg.epochs):
        g = torch.Generator().manual_seed(cfg.seed * 1_000_003 + epoch)
        order = torch.randperm(len(seqs), generator=g).tolist()
        total_loss, total_targets = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            ids, mask = _pad_batch([seqs[i] for i in batch], [masks[i] for i in batch])
            loss_sum, n_targets = _sequence_loss(model, ids, mask)
            if n_targets == 0:
                continue
            loss = loss_sum / n_targets
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"training diverged: non-finite loss at epoch {epoch}, "
                    f"batch starting at {start}"
                )
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            optimizer.step()
            total_loss += float(loss_sum.detach())
            total_targets += n_targets
        curve.append(total_loss / max(total_targets, 1))
    return curve, optimizer


# --- generation ---------------------------------------------------------------

def generate(
    model: DecoderLM,
    prompt_ids: Sequence[int],
    params: SamplingParams = SamplingParams(),
    grammar: MusicGrammar | None = None,
    max_new: int = 64,
    seed: int = 0,
    stop_ids: Sequence[int] = (),
) -> list[int]:
    """Sample up to *max_new* tokens after the prompt; returns only new ids.

    The context window slides: when prompt + generation exceed context_len the
    oldest tokens fall off the left edge. Stop ids end generation once emitted
    outside a music block.
    """
    if len(prompt_ids) == 0:
        raise ValueError("prompt must not be empty")
    gen = torch.Generator().manual_seed(seed)
    ids = list(prompt_ids)
    new_ids: list[int] = []
    stop = set(stop_ids)
    model.eval()
    with torch.no_grad():
        for _ in range(max_new):
            window = ids[-model.config.context_len :]
            logits = model(torch.as_tensor(window, dtype=torch.long))[0, -1, :]
            allowed = grammar.allowed_ids() if grammar is not None else None
            token = sample_token(
                logits, params, generated_ids=new_ids, generator=gen, allowed_ids=allowed
            )
            if grammar is not None:
                grammar.advance(token)
            ids.append(token)
            new_ids.append(token)
            in_block = grammar.in_block if grammar is not None else False
            if token in stop and not in_block:
                break
    return new_ids


def generate_music_block(
    model: DecoderLM,
    vocab: Vocabulary,
    prompt_ids: Sequence[int],
    params: SamplingParams = SamplingParams(),
    seed: int = 0,
) -> MusicTokenSeq:
    """Force one grammar-constrained block and return its 5 item tokens."""
    budget = ITEM_TOKENS + 2  # start_of_music + 5 + end_of_music
    prompt = list(prompt_ids)[-(model.config.context_len - budget) :]
    grammar = MusicGrammar(vocab, force_start=True)
    out = generate(
        model, prompt, params, grammar=grammar, max_new=budget, seed=seed,
        stop_ids=(vocab.eom_id,),
    )
    seq = tuple(out[1 : 1 + ITEM_TOKENS])
    vocab.validate_item(seq)
    return seq  # type: ignore[return-value]


# --- checkpoints ---------------------------------------------------------------

def _write_tensor(fh, name: str, tensor: torch.Tensor) -> None:
    data = tensor.detach().cpu().contiguous()
    if data.dtype not in _DTYPE_CODES:
        data = data.to(torch.float32)
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<H", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<BB", _DTYPE_CODES[data.dtype], data.ndim))
    for dim in data.shape:
        fh.write(struct.pack("<I", dim))
    fh.write(data.numpy().tobytes())


def _read_tensor(buf: io.BytesIO) -> tuple[str, torch.Tensor]:
    head = buf.read(2)
    if len(head) < 2:
        raise CheckpointError("truncated checkpoint (tensor header)")
    (name_len,) = struct.unpack("<H", head)
    name = buf.read(name_len).decode("utf-8")
    meta = buf.read(2)
    if len(meta) < 2:
        raise CheckpointError("truncated checkpoint (tensor meta)")
    code, ndim = struct.unpack("<BB", meta)
    shape = []
    for _ in range(ndim):
        raw = buf.read(4)
        if len(raw) < 4:
            raise CheckpointError("truncated checkpoint (tensor shape)")
        shape.append(struct.unpack("<I", raw)[0])
    dtype = _CODE_DTYPES.get(code)
    if dtype is None:
        raise CheckpointError(f"unknown tensor dtype code {code}")
    count = 1
    for dim in shape:
        count *= dim
    itemsize = torch.tensor([], dtype=dtype).element_size()
    payload = buf.read(count * itemsize)
    if len(payload) < count * itemsize:
        raise CheckpointError("truncated checkpoint (tensor payload)")
    tensor = torch.frombuffer(bytearray(payload), dtype=dtype).reshape(shape).clone()
    return name, tensor


def save_checkpoint(
    path: str | Path,
    model: DecoderLM,
    optimizer: torch.optim.AdamW | None = None,
    extra: dict | None = None,
) -> None:
    """Binary container: config header then named float32/int64 tensors."""
    path = Path(path)
    names = [n for n, _ in model.named_parameters()]
    header = {
        "model": asdict(model.config),
        "extra": extra or {},
        "has_optimizer": optimizer is not None,
    }
    with path.open("wb") as fh:
        fh.write(CKPT_MAGIC)
        blob = json.dumps(header).encode("utf-8")
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        tensors: list[tuple[str, torch.Tensor]] = [
            (f"param/{n}", p) for n, p in model.named_parameters()
        ]
        if optimizer is not None:
            state = optimizer.state_dict()["state"]
            for idx, name in enumerate(names):
                entry = state.get(idx)
                if entry is None:
                    continue
                for key, value in entry.items():
                    tensors.append((f"opt/{name}/{key}", torch.as_tensor(value)))
        fh.write(struct.pack("<I", len(tensors)))
        for name, tensor in tensors:
            _write_tensor(fh, name, tensor)


def load_checkpoint(
    path: str | Path, expected_config: ModelConfig | None = None
) -> tuple[DecoderLM, dict | None, dict]:
    """Rebuild (model, optimizer state by param name, extra metadata)."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < len(CKPT_MAGIC) + 4 or raw[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CheckpointError(f"{path.name}: not a TPCKPT1 checkpoint")
    buf = io.BytesIO(raw[len(CKPT_MAGIC) :])
    (header_len,) = struct.unpack("<I", buf.read(4))
    header_raw = buf.read(header_len)
    if len(header_raw) < header_len:
        raise CheckpointError(f"{path.name}: truncated header")
    header = json.loads(header_raw.decode("utf-8"))
    config = ModelConfig(**header["model"])
    if expected_config is not None and config != expected_config:
        raise CheckpointError(
            f"{path.name}: checkpoint config {config} does not match expected "
            f"{expected_config}"
        )
    count_raw = buf.read(4)
    if len(count_raw) < 4:
        raise CheckpointError(f"{path.name}: truncated tensor count")
    (n_tensors,) = struct.unpack("<I", count_raw)
    tensors = dict(_read_tensor(buf) for _ in range(n_tensors))

    model = DecoderLM(config)
    with torch.no_grad():
        for name, p in model.named_parameters():
            key = f"param/{name}"
            if key not in tensors:
                raise CheckpointError(f"{path.name}: missing tensor {key}")
            if tuple(tensors[key].shape) != tuple(p.shape):
                raise CheckpointError(f"{path.name}: shape mismatch for {key}")
            p.copy_(tensors[key])

    opt_state: dict | None = None
    if header.get("has_optimizer"):
        opt_state = {}
        for full_name, tensor in tensors.items():
            if not full_name.startswith("opt/"):
                continue
            pname, key = full_name[4:].rsplit("/", 1)
            opt_state.setdefault(pname, {})[key] = tensor
    return model, opt_state, header.get("extra", {})


def restore_optimizer(
    model: DecoderLM, cfg: TrainConfig, opt_state: dict | None
) -> torch.optim.AdamW:
    """AdamW whose per-parameter moments are loaded from a checkpoint."""
    optimizer = make_optimizer(model, cfg)
    if opt_state:
        names = [n for n, _ in model.named_parameters()]
        sd = optimizer.state_dict()
        sd["state"] = {
            idx: dict(opt_state[name]) for idx, name in enumerate(names) if name in opt_state
        }
        optimizer.load_state_dict(sd)
    return optimizer
