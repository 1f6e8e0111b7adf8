"""
アクター・クリティック方策と、そのバージョン付きバイナリチェックポイント

チェックポイントの構成 (すべてリトルエンディアン):
    magic (8 byte) | version u32 | テンソル数 u32
    | 各テンソル: 名前長 u16, 名前 (utf-8), 次元数 u8, 各次元 u32
    | 各テンソルの float64 値 (行優先)
    | チェックサム u64 (それまでの全バイトの blake2b-64)
"""
import hashlib
import os
import struct
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from loguru import logger
from torch import nn
from torch.distributions import Normal

from src.models.errors import CheckpointError

MAGIC = b"CSTPOLCY"
FORMAT_VERSION = 1
OBS_DIM = 4
ACTION_DIM = 2
LOG_STD_MIN, LOG_STD_MAX = -5.0, 1.0
# 観測 [p_x, v_x, p_z, v_z] の固定スケーリング
OBS_SCALE = (10.0, 2.0, 10.0, 2.0)


def _mlp(sizes: Sequence[int]) -> nn.Sequential:
    layers: list[nn.Module] = []
    for i in range(len(sizes) - 1):
        layers.append(nn.Linear(sizes[i], sizes[i + 1]))
        if i < len(sizes) - 2:
            layers.append(nn.Tanh())
    return nn.Sequential(*layers)


class ActorCritic(nn.Module):
    """
    tanh 隠れ層の MLP による状態非依存分散のガウス方策と価値関数

    アクターは (クリップ前の) 行動の平均を出力し、log_std は学習パラメータ。
    """
    def __init__(self, hidden_sizes: Sequence[int] = (64, 64), log_std_init: float = -0.5,
                 seed: Optional[int] = None):
        super().__init__()
        self.hidden_sizes = tuple(int(h) for h in hidden_sizes)
        self.actor = _mlp([OBS_DIM, *self.hidden_sizes, ACTION_DIM])
        self.critic = _mlp([OBS_DIM, *self.hidden_sizes, 1])
        self.log_std = nn.Parameter(torch.full((ACTION_DIM,), float(log_std_init), dtype=torch.float64))
        self.register_buffer('obs_scale', torch.tensor(OBS_SCALE, dtype=torch.float64))
        self.double()
        self._initialize(seed)

    def _initialize(self, seed: Optional[int]) -> None:
        # 隠れ層は直交初期化、アクター出力層は 0.01 倍
        with torch.random.fork_rng():
            if seed is not None:
                torch.manual_seed(seed)
            for net, last_gain in ((self.actor, 0.01), (self.critic, 1.0)):
                linears = [m for m in net if isinstance(m, nn.Linear)]
                for k, layer in enumerate(linears):
                    gain = last_gain if k == len(linears) - 1 else np.sqrt(2.0)
                    nn.init.orthogonal_(layer.weight, gain=gain)
                    nn.init.zeros_(layer.bias)

    def _normalize(self, obs: torch.Tensor) -> torch.Tensor:
        return obs / self.obs_scale

    def forward(self, obs: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        x = self._normalize(obs)
        return self.actor(x), self.critic(x).squeeze(-1)

    def distribution(self, obs: torch.Tensor) -> Normal:
        mean = self.actor(self._normalize(obs))
        return Normal(mean, self.log_std.exp().expand_as(mean))

    def log_prob(self, obs: torch.Tensor, raw_actions: torch.Tensor) -> torch.Tensor:
        return self.distribution(obs).log_prob(raw_actions).sum(-1)

    def value(self, obs: torch.Tensor) -> torch.Tensor:
        return self.critic(self._normalize(obs)).squeeze(-1)

    @property
    def std(self) -> np.ndarray:
        return self.log_std.detach().exp().numpy()

    def clamp_log_std(self) -> None:
        with torch.no_grad():
            self.log_std.clamp_(LOG_STD_MIN, LOG_STD_MAX)

    def mean_action(self, obs: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            return self.actor(self._normalize(torch.as_tensor(obs))).numpy()

    def values(self, obs: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            return self.value(torch.as_tensor(obs)).numpy()

    def act(self, obs: np.ndarray, rng: Optional[np.random.Generator] = None,
            deterministic: bool = False) -> np.ndarray:
        """
        クリップ前の行動をサンプル (探索雑音は numpy の乱数列から取る)
        """
        mean = self.mean_action(obs)
        if deterministic:
            return mean
        if rng is None:
            raise ValueError("確率的な行動には乱数生成器が必要です")
        return mean + self.std * rng.standard_normal(mean.shape)

    def is_finite(self) -> bool:
        return all(torch.isfinite(p).all().item() for p in self.parameters())


def clip_actions(raw: np.ndarray, delta_thrust_max: float, theta_ref_max: float) -> np.ndarray:
    """方策出力を PolicyAction の範囲へ射影"""
    bounds = np.array([delta_thrust_max, theta_ref_max])
    return np.clip(raw, -bounds, bounds)


def _tensors(policy: ActorCritic) -> list[tuple[str, np.ndarray]]:
    return [(name, t.detach().numpy()) for name, t in policy.state_dict().items() if name != 'obs_scale']


def encode_checkpoint(policy: ActorCritic) -> bytes:
    tensors = _tensors(policy)
    header = bytearray(MAGIC)
    header += struct.pack('<II', FORMAT_VERSION, len(tensors))
    for name, array in tensors:
        encoded = name.encode('utf-8')
        header += struct.pack('<H', len(encoded)) + encoded
        header += struct.pack('<B', array.ndim)
        header += struct.pack(f'<{array.ndim}I', *array.shape)
    body = b''.join(np.ascontiguousarray(array, dtype='<f8').tobytes() for _, array in tensors)
    payload = bytes(header) + body
    checksum = hashlib.blake2b(payload, digest_size=8).digest()
    return payload + checksum


def _parse_header(data: bytes) -> tuple[int, list[tuple[str, tuple[int, ...]]], int]:
    if len(data) < len(MAGIC) + 16 or data[:len(MAGIC)] != MAGIC:
        raise CheckpointError("マジック文字列が一致しません")
    offset = len(MAGIC)
    version, count = struct.unpack_from('<II', data, offset)
    offset += 8
    if version != FORMAT_VERSION:
        raise CheckpointError(f"未対応のフォーマットバージョンです: {version}")
    table = []
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from('<H', data, offset)
            offset += 2
            name = data[offset:offset + name_len].decode('utf-8')
            offset += name_len
            (ndim,) = struct.unpack_from('<B', data, offset)
            offset += 1
            shape = struct.unpack_from(f'<{ndim}I', data, offset)
            offset += 4 * ndim
            table.append((name, tuple(shape)))
    except (struct.error, UnicodeDecodeError) as e:
        raise CheckpointError(f"ヘッダが壊れています: {e}") from e
    return version, table, offset


def checkpoint_id(data: bytes) -> str:
    return data[-8:].hex()


def decode_checkpoint(data: bytes) -> ActorCritic:
    payload, checksum = data[:-8], data[-8:]
    if hashlib.blake2b(payload, digest_size=8).digest() != checksum:
        raise CheckpointError("チェックサムが一致しません")
    _, table, offset = _parse_header(payload)
    state = {}
    for name, shape in table:
        n = int(np.prod(shape)) if shape else 1
        values = np.frombuffer(payload, dtype='<f8', count=n, offset=offset)
        offset += 8 * n
        state[name] = torch.from_numpy(values.reshape(shape).astype(np.float64))
    if offset != len(payload):
        raise CheckpointError("テンソル長がヘッダと一致しません")
    hidden = [shape[0] for name, shape in table if name.startswith('actor.') and name.endswith('.weight')][:-1]
    policy = ActorCritic(hidden_sizes=hidden)
    state['obs_scale'] = policy.obs_scale
    policy.load_state_dict(state)
    if not policy.is_finite():
        raise CheckpointError("重みに NaN/inf が含まれます")
    log_std = policy.log_std.detach()
    if torch.any(log_std < LOG_STD_MIN) or torch.any(log_std > LOG_STD_MAX):
        raise CheckpointError(f"log_std が [{LOG_STD_MIN}, {LOG_STD_MAX}] の範囲外です: {log_std.tolist()}")
    return policy


def save_checkpoint(policy: ActorCritic, path: Path) -> str:
    """
    一時ファイルに書いてから rename する (途中で落ちても壊れたファイルを残さない)
    """
    path = Path(path)
    data = encode_checkpoint(policy)
    tmp = path.with_name(path.name + '.tmp')
    tmp.write_bytes(data)
    os.replace(tmp, path)
    logger.info(f"チェックポイントを保存しました: {path} ({checkpoint_id(data)})")
    return checkpoint_id(data)


def load_checkpoint(path: Path) -> tuple[ActorCritic, str]:
    data = Path(path).read_bytes()
    policy = decode_checkpoint(data)
    return policy, checkpoint_id(data)


def describe_checkpoint(path: Path) -> dict:
    data = Path(path).read_bytes()
    version, table, _ = _parse_header(data[:-8])
    checksum_ok = hashlib.blake2b(data[:-8], digest_size=8).digest() == data[-8:]
    return {
        'magic': MAGIC.decode('ascii'),
        'version': version,
        'tensors': [{'name': name, 'shape': list(shape)} for name, shape in table],
        'checksum': checkpoint_id(data),
        'checksum_ok': checksum_ok,
    }
