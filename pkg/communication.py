"""
Communication Block and message protocol.

- soft_attention / CommLayer / CommBlock: stacked masked self-attention over
  the agents' (z, a) pairs
- Locality masks and per-agent ("ego") view masks
- MessageCodec: fixed 28-byte frames carrying the 160-bit latent
- SummaryFrame + linear_exchange_step: the O(n) key/value exchange
"""
import math
import struct
from dataclasses import dataclass
from typing import Dict, Iterable, Mapping, Optional, Sequence, Set, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from core import CodecError, InternalError, InvalidInputError, ProtocolError


# =============================================================================
# ATTENTION
# =============================================================================

class OpCounter:
    """Counts scalar multiplies spent on attention scores and weighting"""

    def __init__(self):
        self.multiplies = 0

    def add(self, count: int) -> None:
        self.multiplies += int(count)

    def reset(self) -> None:
        self.multiplies = 0


def naive_attention_ops(n_agents: int, dim: int) -> int:
    # Q K^T plus weights @ V over the full n x n matrix
    return 2 * n_agents * n_agents * dim


def soft_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor,
                   mask: Optional[torch.Tensor] = None, counter: Optional[OpCounter] = None) -> torch.Tensor:
    """
    Masked scaled dot-product attention over the agent axis.

    Args:
        q, k, v: [..., n, d]
        mask: [..., n, n] boolean, True where row i may attend to column j

    Returns:
        [..., n, d]; masked entries receive exactly zero weight
    """
    if q.shape != k.shape or k.shape[:-1] != v.shape[:-1]:
        raise InvalidInputError(f"attention shapes disagree: {tuple(q.shape)} {tuple(k.shape)} {tuple(v.shape)}")
    n, d = q.shape[-2], q.shape[-1]
    scores = q @ k.transpose(-1, -2) / math.sqrt(d)
    if mask is not None:
        if mask.shape[-2:] != (n, n):
            raise InvalidInputError(f"mask shape {tuple(mask.shape)} does not match {n} agents")
        if not bool(mask.any(dim=-1).all()):
            raise InternalError("attention mask has a row with no permitted entries")
        scores = scores.masked_fill(~mask, float("-inf"))
    if counter is not None:
        counter.add(naive_attention_ops(n, d))
    return torch.softmax(scores, dim=-1) @ v


def linear_exchange_step(local_q: torch.Tensor, all_k_summaries: Mapping[int, torch.Tensor],
                         all_v_summaries: Mapping[int, torch.Tensor], expected: Optional[Iterable[int]] = None,
                         counter: Optional[OpCounter] = None) -> torch.Tensor:
    """
    One agent's attention row computed from broadcast key/value summaries.

    Only the local query row is formed, so the work per agent is linear in
    the number of senders. Senders are visited in ascending id order.
    """
    senders = sorted(all_k_summaries)
    if sorted(all_v_summaries) != senders:
        raise ProtocolError("key and value summaries come from different senders")
    for agent in expected or ():
        if agent not in all_k_summaries:
            raise ProtocolError(f"missing summary from agent {agent}")
    if not senders:
        raise ProtocolError("no summaries to attend over")
    keys = torch.stack([all_k_summaries[j] for j in senders])
    values = torch.stack([all_v_summaries[j] for j in senders])
    d = local_q.shape[-1]
    weights = torch.softmax(keys @ local_q / math.sqrt(d), dim=-1)
    if counter is not None:
        counter.add(2 * len(senders) * d)
    return weights @ values


# =============================================================================
# MASKS
# =============================================================================

def build_locality_mask(neighbors: Union[Sequence[Iterable[int]], np.ndarray],
                        radius: Optional[float] = None, n_agents: Optional[int] = None) -> np.ndarray:
    """
    Boolean [n, n] mask, True where agent i may hear agent j.

    `neighbors` is either a list of neighbor sets (already radius-limited by
    the environment) or an [n, n] matrix of pairwise distances. radius None
    or inf disables locality and yields the all-true mask.
    """
    if isinstance(neighbors, np.ndarray) and neighbors.ndim == 2:
        n = neighbors.shape[0]
        if radius is None or math.isinf(radius):
            return np.ones((n, n), dtype=bool)
        return (neighbors <= radius) | np.eye(n, dtype=bool)
    sets = [set(s) for s in neighbors]
    n = n_agents if n_agents is not None else len(sets)
    if radius is None or math.isinf(radius):
        return np.ones((n, n), dtype=bool)
    mask = np.eye(n, dtype=bool)
    for i, group in enumerate(sets):
        for j in group:
            mask[i, int(j)] = True
    return mask


def sender_mask(mask: Optional[torch.Tensor], n: int, alive: Optional[torch.Tensor] = None,
                include_dead: bool = True, batch_shape=()) -> torch.Tensor:
    """Locality mask restricted to agents that are still sending, diagonal kept"""
    eye = torch.eye(n, dtype=torch.bool)
    if mask is None:
        mask = torch.ones(*batch_shape, n, n, dtype=torch.bool)
    mask = mask.bool()
    if not include_dead and alive is not None:
        mask = mask & alive.bool().unsqueeze(-2)
    return mask | eye


def ego_masks(mask: torch.Tensor) -> torch.Tensor:
    """
    [..., n, n] -> [..., n, n, n] per-agent view masks.

    View i permits (j, k) iff i hears j and i hears k; the diagonal is
    always permitted so unheard rows attend only to themselves.
    """
    n = mask.shape[-1]
    view = mask.unsqueeze(-1) & mask.unsqueeze(-2)
    return view | torch.eye(n, dtype=torch.bool)


def view_mask(heard: torch.Tensor) -> torch.Tensor:
    """Single ego view from a boolean [n] 'heard' vector"""
    n = heard.shape[-1]
    return (heard.unsqueeze(-1) & heard.unsqueeze(-2)) | torch.eye(n, dtype=torch.bool)


def sinusoidal_encoding(n_positions: int, dim: int) -> torch.Tensor:
    position = torch.arange(n_positions, dtype=torch.float64).unsqueeze(1)
    freq = torch.exp(torch.arange(0, dim, 2, dtype=torch.float64) * (-math.log(10000.0) / dim))
    table = torch.zeros(n_positions, dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(position * freq)
    table[:, 1::2] = torch.cos(position * freq)[:, :dim // 2]
    return table.float()


# =============================================================================
# COMMUNICATION BLOCK
# =============================================================================

class CommLayer(nn.Module):
    """Post-norm self-attention layer with dropout on the attention output"""

    def __init__(self, d_model: int, ffn_size: int, dropout: float = 0.1):
        super().__init__()
        self.query = nn.Linear(d_model, d_model)
        self.key = nn.Linear(d_model, d_model)
        self.value = nn.Linear(d_model, d_model)
        self.out = nn.Linear(d_model, d_model)
        self.norm1 = nn.LayerNorm(d_model)
        self.ffn = nn.Sequential(nn.Linear(d_model, ffn_size), nn.ELU(), nn.Linear(ffn_size, d_model))
        self.norm2 = nn.LayerNorm(d_model)
        self.dropout = dropout

    def forward(self, x: torch.Tensor, mask: Optional[torch.Tensor] = None, train_mode: bool = False,
                counter: Optional[OpCounter] = None) -> torch.Tensor:
        attended = soft_attention(self.query(x), self.key(x), self.value(x), mask, counter)
        return self._finish(x, attended, train_mode)

    def summarize(self, x_row: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """Key and value projections an agent broadcasts in linear-exchange mode"""
        return self.key(x_row), self.value(x_row)

    def forward_row(self, x_row: torch.Tensor, keys: Mapping[int, torch.Tensor], values: Mapping[int, torch.Tensor],
                    expected: Optional[Iterable[int]] = None, counter: Optional[OpCounter] = None) -> torch.Tensor:
        attended = linear_exchange_step(self.query(x_row), keys, values, expected, counter)
        return self._finish(x_row, attended, False)

    def _finish(self, x, attended, train_mode):
        x = self.norm1(x + F.dropout(self.out(attended), self.dropout, train_mode))
        return self.norm2(x + self.ffn(x))


class CommBlock(nn.Module):
    """
    Stacked self-attention over every agent's (flat z, action) pair.

    mode="ego": every agent's feature is computed inside its own view mask,
    so agents it cannot hear have no influence at any depth.
    mode="shared": one pass with the raw locality mask at every layer (the
    layout reproduced by per-layer key/value exchange).
    """

    def __init__(self, latent_size: int, n_actions: int, d_model: int, n_layers: int = 3,
                 dropout: float = 0.1, use_positional_encoding: bool = True, action_embedding: bool = False,
                 broadcast_dead: bool = True, ffn_size: Optional[int] = None, mode: str = "ego",
                 max_agents: int = 64):
        super().__init__()
        if mode not in ("ego", "shared"):
            raise InvalidInputError(f"unknown communication mode: {mode}")
        self.latent_size = latent_size
        self.n_actions = n_actions
        self.d_model = d_model
        self.mode = mode
        self.use_positional_encoding = use_positional_encoding
        self.broadcast_dead = broadcast_dead
        self.action_embed = nn.Embedding(n_actions, d_model) if action_embedding else None
        action_size = d_model if action_embedding else n_actions
        self.input = nn.Linear(latent_size + action_size, d_model)
        self.layers = nn.ModuleList(
            CommLayer(d_model, ffn_size or 2 * d_model, dropout) for _ in range(n_layers)
        )
        self.register_buffer("positional", sinusoidal_encoding(max_agents, d_model), persistent=False)

    @classmethod
    def from_config(cls, config, n_actions: int) -> "CommBlock":
        return cls(
            latent_size=config.latent_size,
            n_actions=n_actions,
            d_model=config.hidden_size,
            n_layers=config.comm_layers,
            dropout=config.comm_dropout,
            use_positional_encoding=config.use_positional_encoding,
            action_embedding=config.action_embedding,
            broadcast_dead=config.broadcast_dead,
            ffn_size=config.comm_ffn_size,
            mode=config.comm_mode,
            max_agents=max(64, config.n_agents),
        )

    def embed(self, z: torch.Tensor, a: torch.Tensor, positions: Optional[torch.Tensor] = None) -> torch.Tensor:
        n = z.shape[-2]
        if self.action_embed is not None:
            action = self.action_embed(a.long())
        else:
            action = F.one_hot(a.long(), self.n_actions).to(z.dtype)
        x = self.input(torch.cat([z, action], dim=-1))
        if self.use_positional_encoding:
            table = self.positional[:n] if positions is None else self.positional[positions]
            x = x + table.to(x.dtype)
        return x

    def forward(self, z_prev: torch.Tensor, a_prev: torch.Tensor, alive: Optional[torch.Tensor] = None,
                mask: Optional[torch.Tensor] = None, train_mode: bool = False) -> torch.Tensor:
        """
        Args:
            z_prev: [..., n, K*C] flat latents from the previous step
            a_prev: [..., n] previous actions
            alive: [..., n] sender liveness (only used when dead agents stop broadcasting)
            mask: [..., n, n] locality mask or None for full connectivity

        Returns:
            e: [..., n, d_model]
        """
        n = z_prev.shape[-2]
        if a_prev.shape[-1] != n or (alive is not None and alive.shape[-1] != n):
            raise InvalidInputError("communication inputs disagree on the number of agents")
        if mask is not None and mask.shape[-1] != n:
            raise InvalidInputError(f"mask covers {mask.shape[-1]} agents, inputs cover {n}")
        mask = sender_mask(mask, n, alive, self.broadcast_dead, z_prev.shape[:-2])
        x = self.embed(z_prev, a_prev)
        if self.mode == "shared" or bool(mask.all()):
            for layer in self.layers:
                x = layer(x, mask, train_mode)
            return x
        views = ego_masks(mask)
        xe = x.unsqueeze(-3).expand(*x.shape[:-2], n, n, x.shape[-1])
        for layer in self.layers:
            xe = layer(xe, views, train_mode)
        return torch.diagonal(xe, dim1=-3, dim2=-2).transpose(-1, -2)

    def encode_agent(self, z_rows: torch.Tensor, a_rows: torch.Tensor, heard: torch.Tensor, agent: int,
                     counter: Optional[OpCounter] = None) -> torch.Tensor:
        """
        Inference-time feature of one agent from the rows it has heard.

        Rows outside `heard` must hold the bootstrap placeholder; both the
        centralized controller and the per-agent runtimes call this with
        identical tensors.
        """
        x = self.embed(z_rows, a_rows)
        mask = view_mask(heard)
        for layer in self.layers:
            x = layer(x, mask, False, counter)
        return x[agent]

    def input_row(self, z: torch.Tensor, a: torch.Tensor, agent: int) -> torch.Tensor:
        """Embedded input row of a single agent, for linear exchange"""
        return self.embed(z.unsqueeze(0), a.reshape(1), torch.tensor([agent]))[0]


# =============================================================================
# MESSAGE CODEC
# =============================================================================

@dataclass(frozen=True)
class Message:
    agent_id: int
    step: int
    z_indices: Tuple[int, ...]
    action: int
    alive: bool


class MessageCodec:
    """
    Fixed-size frame: agent_id(2) | step(4) | z payload | action(1) | alive(1).

    Integers are big-endian; class indices are packed MSB-first at
    log2(C) bits each. With K=32, C=32 the payload is 160 bits and the
    frame 28 bytes.
    """

    HEADER = struct.Struct(">HI")
    TRAILER = struct.Struct(">BB")

    def __init__(self, n_groups: int = 32, n_classes: int = 32):
        if n_classes < 2 or n_classes & (n_classes - 1):
            raise CodecError(f"class count must be a power of two, got {n_classes}")
        self.n_groups = n_groups
        self.n_classes = n_classes
        self.bits_per_index = n_classes.bit_length() - 1
        self.payload_bits = n_groups * self.bits_per_index
        self.payload_bytes = (self.payload_bits + 7) // 8
        self.pad_bits = self.payload_bytes * 8 - self.payload_bits
        self.frame_size = self.HEADER.size + self.payload_bytes + self.TRAILER.size

    @classmethod
    def from_config(cls, config) -> "MessageCodec":
        return cls(config.n_categoricals, config.n_classes)

    def _indices(self, z) -> Tuple[int, ...]:
        if isinstance(z, torch.Tensor):
            z = z.detach().cpu()
            if z.dim() == 2:
                z = z.argmax(dim=-1)
            elif z.dim() == 1 and z.shape[0] == self.n_groups * self.n_classes:
                z = z.reshape(self.n_groups, self.n_classes).argmax(dim=-1)
            z = z.tolist()
        indices = tuple(int(i) for i in np.asarray(z).reshape(-1))
        if len(indices) != self.n_groups:
            raise CodecError(f"expected {self.n_groups} class indices, got {len(indices)}")
        for index in indices:
            if not 0 <= index < self.n_classes:
                raise CodecError(f"class index {index} outside [0, {self.n_classes})")
        return indices

    def pack_indices(self, indices: Sequence[int]) -> bytes:
        value = 0
        for index in indices:
            value = (value << self.bits_per_index) | index
        return (value << self.pad_bits).to_bytes(self.payload_bytes, "big")

    def unpack_indices(self, payload: bytes) -> Tuple[int, ...]:
        value = int.from_bytes(payload, "big")
        if value & ((1 << self.pad_bits) - 1):
            raise CodecError("nonzero padding bits in latent payload")
        value >>= self.pad_bits
        low = (1 << self.bits_per_index) - 1
        out = []
        for g in range(self.n_groups):
            shift = (self.n_groups - 1 - g) * self.bits_per_index
            out.append((value >> shift) & low)
        return tuple(out)

    def encode(self, agent_id: int, step: int, z, action: int, alive: Union[bool, int] = True) -> bytes:
        if not 0 <= int(agent_id) < 2**16:
            raise CodecError(f"agent_id {agent_id} does not fit in 16 bits")
        if not 0 <= int(step) < 2**32:
            raise CodecError(f"step {step} does not fit in 32 bits")
        if not 0 <= int(action) < 256:
            raise CodecError(f"action {action} does not fit in 8 bits")
        if int(alive) not in (0, 1):
            raise CodecError(f"alive flag must be 0 or 1, got {alive}")
        payload = self.pack_indices(self._indices(z))
        return self.HEADER.pack(int(agent_id), int(step)) + payload + self.TRAILER.pack(int(action), int(alive))

    def decode(self, data: bytes) -> Message:
        if len(data) != self.frame_size:
            raise CodecError(f"frame is {len(data)} bytes, expected {self.frame_size}")
        agent_id, step = self.HEADER.unpack_from(data, 0)
        start = self.HEADER.size
        indices = self.unpack_indices(data[start:start + self.payload_bytes])
        action, alive = self.TRAILER.unpack_from(data, start + self.payload_bytes)
        if alive not in (0, 1):
            raise CodecError(f"alive byte must be 0 or 1, got {alive}")
        return Message(agent_id=agent_id, step=step, z_indices=indices, action=action, alive=bool(alive))

    def encode_message(self, message: Message) -> bytes:
        return self.encode(message.agent_id, message.step, message.z_indices, message.action, message.alive)


DEFAULT_CODEC = MessageCodec()


def encode_message(agent_id: int, step: int, z, action: int, alive: Union[bool, int] = True,
                   codec: MessageCodec = DEFAULT_CODEC) -> bytes:
    return codec.encode(agent_id, step, z, action, alive)


def decode_message(data: bytes, codec: MessageCodec = DEFAULT_CODEC) -> Message:
    return codec.decode(data)


def frame_sender(data: bytes) -> int:
    if len(data) < 2:
        raise CodecError("frame too short to carry a sender id")
    return struct.unpack_from(">H", data, 0)[0]


def format_message(frame: Union[bytes, Message], codec: MessageCodec = DEFAULT_CODEC) -> str:
    """Hex dump plus decoded fields, one line"""
    if isinstance(frame, Message):
        frame = codec.encode_message(frame)
    message = codec.decode(frame)
    z = ",".join(str(i) for i in message.z_indices)
    return (f"{frame.hex()}  agent={message.agent_id} step={message.step} "
            f"action={message.action} alive={int(message.alive)} z=[{z}]")


# =============================================================================
# LINEAR-EXCHANGE SUMMARIES
# =============================================================================

@dataclass(frozen=True, eq=False)
class SummaryFrame:
    """Per-layer key/value broadcast: agent_id(2) | step(4) | layer(1) | dim(2) | key f32 | value f32"""

    agent_id: int
    step: int
    layer: int
    key: np.ndarray
    value: np.ndarray

    HEADER = struct.Struct(">HIBH")

    def encode(self) -> bytes:
        key = np.asarray(self.key, dtype=">f4").reshape(-1)
        value = np.asarray(self.value, dtype=">f4").reshape(-1)
        if key.shape != value.shape:
            raise CodecError("key and value summaries differ in size")
        if not 0 <= self.layer < 256 or key.shape[0] >= 2**16:
            raise CodecError("summary layer or dimension out of range")
        header = self.HEADER.pack(self.agent_id, self.step, self.layer, key.shape[0])
        return header + key.tobytes() + value.tobytes()

    @classmethod
    def decode(cls, data: bytes) -> "SummaryFrame":
        if len(data) < cls.HEADER.size:
            raise CodecError("summary frame shorter than its header")
        agent_id, step, layer, dim = cls.HEADER.unpack_from(data, 0)
        expected = cls.HEADER.size + 8 * dim
        if len(data) != expected:
            raise CodecError(f"summary frame is {len(data)} bytes, expected {expected}")
        body = np.frombuffer(data, dtype=">f4", offset=cls.HEADER.size).astype(np.float32)
        return cls(agent_id=agent_id, step=step, layer=layer, key=body[:dim].copy(), value=body[dim:].copy())

    def tensors(self) -> Tuple[torch.Tensor, torch.Tensor]:
        return torch.from_numpy(self.key.copy()), torch.from_numpy(self.value.copy())
