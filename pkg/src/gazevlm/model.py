"""A miniature autoregressive multimodal backbone.

The image is patch-embedded into P = G*G visual tokens (row-major patch
ids, matching the supervision grid), followed by a fixed text prompt and
a fixed-format answer that starts with four reserved gaze placeholder
tokens. A small pre-LN causal transformer produces final-layer hidden
states; linear heads map them to LM logits, patch logits (gaze head) and
14 finding probabilities (classifier head).

The backbone is frozen after seeded random init; training updates only
low-rank adapters on the attention projections plus the stage's heads,
mirroring parameter-efficient fine-tuning of a pretrained model.
"""

import dataclasses
import json
import math
import subprocess
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, TruncationError, ValidationError
from . import text

CHECKPOINT_MAGIC = b"GVLMCKPT"
CHECKPOINT_FORMAT = "gazevlm-ckpt-v1"

STAGE1 = 1
STAGE2 = 2


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    n_layers: int = 2
    n_heads: int = 4
    vocab_size: int = text.VOCAB_SIZE
    max_T: int = 128
    G: int = 8
    patch_pixels: int = 8  # pixels per patch side; image side = G * patch_pixels
    adapter_rank: int = 8
    max_visual_tokens: int = None
    cls_readout: str = "answer_marker"  # or "final"

    def __post_init__(self):
        if self.max_visual_tokens is None:
            object.__setattr__(self, "max_visual_tokens", self.G * self.G)
        if self.d % self.n_heads != 0:
            raise ConfigError(f"d={self.d} not divisible by n_heads={self.n_heads}")
        if self.adapter_rank < 0:
            raise ConfigError(f"adapter_rank must be >= 0, got {self.adapter_rank}")
        if not (self.G * self.G <= self.max_visual_tokens <= self.max_T):
            raise ConfigError(
                f"need G^2 <= max_visual_tokens <= max_T, got "
                f"{self.G * self.G} / {self.max_visual_tokens} / {self.max_T}"
            )
        if self.cls_readout not in ("answer_marker", "final"):
            raise ConfigError(f"unknown cls_readout {self.cls_readout!r}")

    @property
    def P(self):
        return self.G * self.G

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(frozen=True)
class SequenceLayout:
    """Position bookkeeping for one tokenized sample.

    The four gaze placeholders sit contiguously at the start of the
    answer span; answer_marker_index is the ``Answer:`` token right after
    them (the last position whose content is constant across samples).
    """

    visual_span: tuple  # [start, end)
    prompt_span: tuple
    gaze_positions: tuple  # p_1 < p_2 < p_3 < p_4
    answer_span: tuple
    answer_marker_index: int
    last_index: int

    def readout_index(self, mode):
        if mode == "answer_marker":
            return self.answer_marker_index
        if mode == "final":
            return self.last_index
        raise ConfigError(f"unknown cls_readout {mode!r}")


@dataclass(frozen=True)
class Sample:
    """One training/eval example in model-ready form."""

    sample_id: str
    image: object  # (H, W) float array in [0, 1]
    prompt_tokens: tuple
    answer_tokens: tuple
    y: tuple  # 14-dim 0/1
    supervision: object = None  # GazeSupervision or None

    def __post_init__(self):
        text.validate_labels(self.y)
        if tuple(self.answer_tokens[:4]) != text.GAZE_PLACEHOLDER_IDS:
            raise ValidationError("answer_tokens must begin with the four gaze placeholders")
        if self.answer_tokens[4] != text.ANSWER_MARKER_ID:
            raise ValidationError("answer_tokens must carry the Answer: marker after the placeholders")


def make_sample(sample_id, image, labels, supervision=None):
    """Assemble a Sample from a grayscale image and a 14-entry label vector."""
    img = np.asarray(image)
    if img.dtype == np.uint8:
        img = img.astype(np.float32) / 255.0
    return Sample(
        sample_id=sample_id,
        image=img.astype(np.float32),
        prompt_tokens=text.PROMPT_IDS,
        answer_tokens=tuple(text.answer_token_ids(labels)),
        y=text.validate_labels(labels),
        supervision=supervision,
    )


def build_sequence(sample, config):
    """Token ids plus SequenceLayout for one sample.

    Sequence: P image-placeholder tokens (their embeddings are replaced
    by patch embeddings), the prompt, then the fixed-format answer.
    """
    P = config.P
    ids = [text.IMG_ID] * P + list(sample.prompt_tokens) + list(sample.answer_tokens)
    T = len(ids)
    if T > config.max_T:
        raise TruncationError(f"sequence length {T} exceeds max_T={config.max_T}")
    prompt_end = P + len(sample.prompt_tokens)
    layout = SequenceLayout(
        visual_span=(0, P),
        prompt_span=(P, prompt_end),
        gaze_positions=tuple(prompt_end + i for i in range(4)),
        answer_span=(prompt_end, T),
        answer_marker_index=prompt_end + 4,
        last_index=T - 1,
    )
    return ids, layout


class LoRALinear(nn.Module):
    """A frozen linear layer with an additive rank-r trainable update.

    The second factor is zero-initialized, so a freshly built model
    computes exactly the base function.
    """

    def __init__(self, d_in, d_out, rank):
        super().__init__()
        self.base = nn.Linear(d_in, d_out)
        self.rank = rank
        if rank > 0:
            self.lora_a = nn.Parameter(torch.empty(rank, d_in))
            self.lora_b = nn.Parameter(torch.zeros(d_out, rank))
            nn.init.kaiming_uniform_(self.lora_a, a=math.sqrt(5))
        else:
            self.lora_a = None
            self.lora_b = None

    def forward(self, x):
        out = self.base(x)
        if self.rank > 0:
            out = out + (x @ self.lora_a.T) @ self.lora_b.T
        return out


class CausalSelfAttention(nn.Module):
    def __init__(self, config):
        super().__init__()
        self.n_heads = config.n_heads
        self.head_dim = config.d // config.n_heads
        r = config.adapter_rank
        self.q_proj = LoRALinear(config.d, config.d, r)
        self.k_proj = LoRALinear(config.d, config.d, r)
        self.v_proj = LoRALinear(config.d, config.d, r)
        self.o_proj = LoRALinear(config.d, config.d, r)

    def forward(self, x, causal_mask):
        B, T, d = x.shape
        q = self.q_proj(x).view(B, T, self.n_heads, self.head_dim).transpose(1, 2)
        k = self.k_proj(x).view(B, T, self.n_heads, self.head_dim).transpose(1, 2)
        v = self.v_proj(x).view(B, T, self.n_heads, self.head_dim).transpose(1, 2)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        att = att.masked_fill(causal_mask[:T, :T], float("-inf"))
        att = F.softmax(att, dim=-1)
        out = (att @ v).transpose(1, 2).contiguous().view(B, T, d)
        return self.o_proj(out)


class Block(nn.Module):
    def __init__(self, config):
        super().__init__()
        self.ln1 = nn.LayerNorm(config.d)
        self.attn = CausalSelfAttention(config)
        self.ln2 = nn.LayerNorm(config.d)
        self.mlp = nn.Sequential(
            nn.Linear(config.d, 4 * config.d),
            nn.GELU(),
            nn.Linear(4 * config.d, config.d),
        )

    def forward(self, x, causal_mask):
        x = x + self.attn(self.ln1(x), causal_mask)
        x = x + self.mlp(self.ln2(x))
        return x


class ToyVLM(nn.Module):
    def __init__(self, config):
        super().__init__()
        self.config = config
        s = config.patch_pixels
        self.tok_emb = nn.Embedding(config.vocab_size, config.d)
        self.pos_emb = nn.Embedding(config.max_T, config.d)
        self.patch_proj = nn.Linear(s * s, config.d)
        self.vis_pos = nn.Parameter(torch.randn(config.P, config.d) * 0.02)
        self.blocks = nn.ModuleList(Block(config) for _ in range(config.n_layers))
        self.ln_f = nn.LayerNorm(config.d)
        # Heads start at zero: logits are uniform and probabilities are 0.5
        # until trained.
        self.lm_head = nn.Linear(config.d, config.vocab_size)
        self.gaze_head = nn.Linear(config.d, config.P)
        self.cls_head = nn.Linear(config.d, text.N_FINDINGS)
        for head in (self.lm_head, self.gaze_head, self.cls_head):
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)
        mask = torch.triu(torch.ones(config.max_T, config.max_T, dtype=torch.bool), diagonal=1)
        self.register_buffer("causal_mask", mask, persistent=False)

    def embed_image(self, images):
        """(B, H, W) pixels -> (B, P, d) visual-token embeddings.

        Patch (row, col) maps to visual token row*G + col; each embedding
        is an affine map of the flattened patch plus a learned per-patch
        position vector.
        """
        config = self.config
        G, s = config.G, config.patch_pixels
        if images.dim() == 2:
            images = images.unsqueeze(0)
        B, H, W = images.shape
        if H != G * s or W != G * s:
            raise ConfigError(f"image is {H}x{W}, config wants {G * s}x{G * s}")
        patches = (
            images.view(B, G, s, G, s).permute(0, 1, 3, 2, 4).reshape(B, config.P, s * s)
        )
        return self.patch_proj(patches) + self.vis_pos.unsqueeze(0)

    def forward(self, token_ids, images):
        """Causal forward pass.

        token_ids: (B, T) with the first P positions holding the image
        placeholder id; their embeddings are replaced by patch embeddings.
        Returns final-layer hidden states (B, T, d) and LM logits
        (B, T, vocab); logits at position t predict token t+1.
        """
        B, T = token_ids.shape
        if T > self.config.max_T:
            raise TruncationError(f"sequence length {T} exceeds max_T={self.config.max_T}")
        P = self.config.P
        visual = self.embed_image(images)
        if visual.dtype != self.tok_emb.weight.dtype:
            visual = visual.to(self.tok_emb.weight.dtype)
        tok = self.tok_emb(token_ids)
        x = torch.cat([visual, tok[:, P:, :]], dim=1)
        x = x + self.pos_emb.weight[:T].unsqueeze(0)
        for block in self.blocks:
            x = block(x, self.causal_mask)
        h = self.ln_f(x)
        return h, self.lm_head(h)


def build_model(config, seed):
    """Deterministically initialize a ToyVLM and freeze everything.

    Trainability is granted per stage afterwards via apply_adapters.
    """
    torch.manual_seed(seed)
    model = ToyVLM(config)
    for p in model.parameters():
        p.requires_grad_(False)
    return model


_STAGE_HEADS = {
    STAGE1: ("gaze_head",),
    STAGE2: ("cls_head", "lm_head"),
}


def apply_adapters(model, stage):
    """Select the parameter subset that receives gradients in a stage.

    Stage 1: adapters + gaze head. Stage 2: adapters + classifier head +
    LM head. Everything else (the backbone and the other stage's head)
    keeps requires_grad=False and stays bitwise intact across training.
    """
    if stage not in _STAGE_HEADS:
        raise ConfigError(f"unknown stage {stage!r}")
    if model.config.adapter_rank < 1:
        raise ConfigError("stage training needs adapter_rank >= 1, got 0")
    for p in model.parameters():
        p.requires_grad_(False)
    view = {}
    for name, param in model.named_parameters():
        head = name.split(".")[0]
        if "lora_" in name or head in _STAGE_HEADS[stage]:
            param.requires_grad_(True)
            view[name] = param
    return view


def adapter_parameter_count(model):
    return sum(p.numel() for n, p in model.named_parameters() if "lora_" in n)


def state_bytes(model):
    """Deterministic byte string of all parameters (for bitwise checks)."""
    chunks = []
    for name, tensor in sorted(model.state_dict().items()):
        chunks.append(name.encode("utf-8"))
        chunks.append(tensor.detach().cpu().numpy().tobytes())
    return b"".join(chunks)


# ---------------------------------------------------------------------------
# Checkpoints: magic + uint64 header length + JSON header + raw arrays
# ---------------------------------------------------------------------------

def git_describe():
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=10,
        )
        if out.returncode == 0:
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return "unknown"


def save_checkpoint(path, model, stage, seed, supervision_variant, steps, extra=None):
    """Write a deterministic single-file checkpoint.

    Layout: 8-byte magic, little-endian uint64 header length, a JSON
    header (sorted keys) holding the manifest and array directory, then
    the raw little-endian array bytes in directory order.
    """
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "config": model.config.to_dict(),
        "stage": stage,
        "seed": seed,
        "supervision_variant": supervision_variant,
        "steps": steps,
        "git_describe": git_describe(),
    }
    if extra:
        manifest.update(extra)
    arrays = []
    blobs = []
    offset = 0
    for name, tensor in model.state_dict().items():
        arr = tensor.detach().cpu().numpy()
        arr = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        blob = arr.tobytes()
        arrays.append(
            {
                "name": name,
                "dtype": arr.dtype.str,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(blob),
            }
        )
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"manifest": manifest, "arrays": arrays}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(len(header).to_bytes(8, "little"))
        f.write(header)
        for blob in blobs:
            f.write(blob)
    return manifest


def read_checkpoint(path):
    """Read a checkpoint into (manifest, {name: numpy array})."""
    with open(path, "rb") as f:
        data = f.read()
    if data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValidationError(f"{path}: not a gazevlm checkpoint")
    pos = len(CHECKPOINT_MAGIC)
    header_len = int.from_bytes(data[pos : pos + 8], "little")
    pos += 8
    header = json.loads(data[pos : pos + header_len].decode("utf-8"))
    pos += header_len
    arrays = {}
    for spec in header["arrays"]:
        start = pos + spec["offset"]
        blob = data[start : start + spec["nbytes"]]
        arrays[spec["name"]] = np.frombuffer(blob, dtype=np.dtype(spec["dtype"])).reshape(
            spec["shape"]
        ).copy()
    return header["manifest"], arrays


def load_model(path):
    """Rebuild the model a checkpoint was saved from."""
    manifest, arrays = read_checkpoint(path)
    config = ModelConfig.from_dict(manifest["config"])
    model = build_model(config, seed=int(manifest["seed"]))
    load_arrays(model, arrays)
    return model, manifest


def load_arrays(model, arrays):
    state = {name: torch.from_numpy(arr.copy()) for name, arr in arrays.items()}
    missing = set(model.state_dict()) - set(state)
    if missing:
        raise ValidationError(f"checkpoint missing parameters: {sorted(missing)}")
    model.load_state_dict(state)
