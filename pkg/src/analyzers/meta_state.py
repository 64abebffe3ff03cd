"""
メタ状態モニター
正規化テレメトリ y_t → 潜在 h_t の再帰状態空間モデル h_{t+1} = tanh(A·h_t + B·y_t)、読み出し ŷ_t = C·h_t
"""

import json
import struct
import zlib
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from ..learners.optimizers import Adam
from ..learners.tasks import STREAM_MONITOR, stream_rng
from ..utils.errors import CheckpointCorruptionError, ContractViolationError, MonitorTrainingError


MONITOR_CHANNELS: Tuple[str, ...] = ("x_gen", "x_inst", "x_grad", "x_mem", "loss", "update_norm")
STD_FLOOR = 1e-8
INPUT_CLIP = 1e6

MODEL_MAGIC = b"SBMM"
MODEL_VERSION = 2
LATENT_MAGIC = b"SBLT"
LATENT_VERSION = 1


class MonitorConfig(BaseModel):
    """メタ状態モニター設定"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    enabled: bool = True
    ref: str = "fit-fresh"
    latent_dim: int = Field(8, ge=1)
    epochs: int = Field(30, ge=1)
    lr: float = Field(0.01, gt=0.0)
    bptt_window: int = Field(32, ge=2)
    clip_grad_norm: float = Field(1.0, gt=0.0)
    calibration_seeds: List[int] = Field(default_factory=lambda: [1001, 1002, 1003])
    seed: int = Field(0, ge=0)
    min_runs: int = Field(3, ge=2)
    min_steps: int = Field(500, ge=2)
    reference_runs: int = Field(1, ge=1)
    patience: int = Field(5, ge=1)
    score_quantile: float = Field(0.99, gt=0.0, lt=1.0)
    score_target: float = Field(2.5, gt=0.0)

    @model_validator(mode="after")
    def _check_split(self) -> "MonitorConfig":
        if self.reference_runs >= self.min_runs:
            raise ValueError("reference_runs must leave at least one run for training (reference_runs < min_runs)")
        return self


@dataclass(frozen=True)
class NormStats:
    """チャネルごとの正規化統計"""
    mean: np.ndarray
    std: np.ndarray
    degenerate: np.ndarray

    @classmethod
    def fit(cls, data: np.ndarray) -> "NormStats":
        mean = np.mean(data, axis=0)
        std = np.std(data, axis=0)
        degenerate = std < STD_FLOOR
        return cls(mean, np.where(degenerate, STD_FLOOR, std), degenerate)


def channel_vector(record) -> np.ndarray:
    """TelemetryRecordから生チャネルベクトルを取り出す"""
    return np.array([record.x_gen, record.x_inst, record.x_grad, record.x_mem,
                     record.loss, record.update_norm], dtype=np.float64)


def channel_matrix(records: Sequence) -> np.ndarray:
    return np.vstack([channel_vector(r) for r in records]) if len(records) else np.zeros((0, len(MONITOR_CHANNELS)))


def normalize_telemetry(record: Union[np.ndarray, Any], norm_stats: NormStats) -> np.ndarray:
    """y_t = (raw − mean) / std（非有限値は飽和値に置換）"""
    raw = record if isinstance(record, np.ndarray) else channel_vector(record)
    y = (raw - norm_stats.mean) / norm_stats.std
    return np.clip(np.nan_to_num(y, nan=0.0, posinf=INPUT_CLIP, neginf=-INPUT_CLIP), -INPUT_CLIP, INPUT_CLIP)


@dataclass(eq=False)
class MonitorModel:
    """学習済みメタ状態モデル f_φ

    baseline_track は学習に使ったランの時刻ごとの平均潜在、baseline_std は
    学習に使っていない参照ランから推定した広がり（score_scale で較正済み）。
    """
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    norm_stats: NormStats
    baseline_mean: np.ndarray
    baseline_std: np.ndarray
    baseline_track: Optional[np.ndarray] = None
    channels: Tuple[str, ...] = MONITOR_CHANNELS
    epochs: int = 0
    best_epoch: int = 0
    final_loss: float = 0.0
    score_scale: float = 1.0
    seed: int = 0
    loss_history: List[float] = field(default_factory=list)
    holdout_history: List[float] = field(default_factory=list)

    @property
    def latent_dim(self) -> int:
        return int(self.A.shape[0])

    @property
    def input_dim(self) -> int:
        return int(self.B.shape[1])

    @property
    def track_length(self) -> int:
        return 0 if self.baseline_track is None else int(self.baseline_track.shape[0])

    @property
    def spectral_radius(self) -> float:
        return float(np.max(np.abs(np.linalg.eigvals(self.A))))

    def bitwise_equal(self, other: "MonitorModel") -> bool:
        return serialize_model(self) == serialize_model(other)

    def summary(self) -> Dict[str, Any]:
        """人間可読なJSONサマリ"""
        return {
            "format": "SBMM",
            "version": MODEL_VERSION,
            "latent_dim": self.latent_dim,
            "input_dim": self.input_dim,
            "channels": list(self.channels),
            "epochs": self.epochs,
            "best_epoch": self.best_epoch,
            "final_loss": self.final_loss,
            "score_scale": self.score_scale,
            "track_length": self.track_length,
            "seed": self.seed,
            "spectral_radius": self.spectral_radius,
            "norm_stats": {
                name: {"mean": float(m), "std": float(s), "degenerate": bool(d)}
                for name, m, s, d in zip(self.channels, self.norm_stats.mean,
                                         self.norm_stats.std, self.norm_stats.degenerate)
            },
        }


def encode_step(model: MonitorModel, h: np.ndarray, y: np.ndarray) -> np.ndarray:
    """h_{t+1} = tanh(A·h_t + B·y_t)"""
    if h.shape != (model.latent_dim,) or y.shape != (model.input_dim,):
        raise ContractViolationError(
            f"encode_step expects h of shape ({model.latent_dim},) and y of shape ({model.input_dim},), "
            f"got {h.shape} and {y.shape}"
        )
    return np.tanh(model.A @ h + model.B @ y)


def encode_stream(model: MonitorModel, raw: np.ndarray) -> np.ndarray:
    """生チャネル行列から潜在軌跡を計算（latent[t] は y_t 取り込み後の h）"""
    h = np.zeros(model.latent_dim)
    out = np.zeros((raw.shape[0], model.latent_dim))
    for t in range(raw.shape[0]):
        h = encode_step(model, h, normalize_telemetry(raw[t], model.norm_stats))
        out[t] = h
    return out


def _track_rows(track: np.ndarray, steps: np.ndarray) -> np.ndarray:
    # 参照軌跡より長いランは最終行で延長
    return track[np.minimum(steps, track.shape[0] - 1)]


def reference_latent(model: MonitorModel, step: Optional[int] = None) -> np.ndarray:
    """ステップ step における基準潜在（step省略時は全体平均）"""
    if step is None or model.track_length == 0:
        return model.baseline_mean
    return model.baseline_track[min(step, model.track_length - 1)]


def deviation_score(model: MonitorModel, h: np.ndarray, step: Optional[int] = None) -> float:
    """基準潜在に対するz距離"""
    z = (h - reference_latent(model, step)) / model.baseline_std
    return float(np.sqrt(np.sum(z * z)))


def deviation_scores(model: MonitorModel, latents: np.ndarray, start: Optional[int] = 0) -> np.ndarray:
    """潜在軌跡全体のスコア（latents[i] はステップ start + i）"""
    if start is None or model.track_length == 0:
        centre = model.baseline_mean
    else:
        centre = _track_rows(model.baseline_track, start + np.arange(latents.shape[0]))
    z = (latents - centre) / model.baseline_std
    return np.sqrt(np.sum(z * z, axis=1))


def monitor_loss_and_grads(A: np.ndarray, B: np.ndarray, C: np.ndarray,
                           Y: np.ndarray, h0: np.ndarray) -> Tuple[float, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """1ウィンドウ分の一歩先予測誤差とBPTT勾配

    損失は mean_t ‖C·h_t − y_t‖² / m。戻り値は (loss, dA, dB, dC, h_last)。
    """
    length, m = Y.shape
    k = A.shape[0]
    H = np.zeros((length + 1, k))
    H[0] = h0
    E = np.zeros((length, m))
    for t in range(length):
        E[t] = C @ H[t] - Y[t]
        H[t + 1] = np.tanh(A @ H[t] + B @ Y[t])

    scale = 2.0 / (length * m)
    loss = float(np.sum(E * E)) / (length * m)

    dA = np.zeros_like(A)
    dB = np.zeros_like(B)
    dC = np.zeros_like(C)
    dh_next = np.zeros(k)
    for t in range(length - 1, -1, -1):
        da = dh_next * (1.0 - H[t + 1] ** 2)
        dA += np.outer(da, H[t])
        dB += np.outer(da, Y[t])
        dC += scale * np.outer(E[t], H[t])
        dh_next = scale * (C.T @ E[t]) + A.T @ da
    return loss, dA, dB, dC, H[length]


def _stream_loss(A: np.ndarray, B: np.ndarray, C: np.ndarray, Y: np.ndarray) -> Tuple[float, int]:
    """ストリーム全体の二乗誤差合計とエントリ数"""
    h = np.zeros(A.shape[0])
    total = 0.0
    for t in range(Y.shape[0]):
        e = C @ h - Y[t]
        total += float(e @ e)
        h = np.tanh(A @ h + B @ Y[t])
    return total, Y.shape[0] * Y.shape[1]


def _mean_loss(A: np.ndarray, B: np.ndarray, C: np.ndarray, normalized: Sequence[np.ndarray]) -> float:
    total, count = 0.0, 0
    for Y in normalized:
        s, c = _stream_loss(A, B, C, Y)
        total += s
        count += c
    return total / count


def _normalize_stream(raw: np.ndarray, norm_stats: NormStats) -> np.ndarray:
    return np.vstack([normalize_telemetry(row, norm_stats) for row in raw])


def one_step_loss(model: MonitorModel, raw_streams: Sequence[np.ndarray]) -> float:
    """正規化空間での平均一歩先予測誤差"""
    return _mean_loss(model.A, model.B, model.C, [_normalize_stream(raw, model.norm_stats) for raw in raw_streams])


def _as_matrix(stream) -> np.ndarray:
    if isinstance(stream, np.ndarray):
        return np.asarray(stream, dtype=np.float64)
    return channel_matrix(list(stream))


def _reference_statistics(fit_latents: List[np.ndarray], reference_latents: List[np.ndarray],
                          config: MonitorConfig) -> Tuple[np.ndarray, np.ndarray, np.ndarray, float]:
    """基準軌跡・全体平均・較正済みの広がり・較正係数

    中心は学習ランの時刻平均。広がりは中心に使っていないランの残差から取る
    （参照ランと、学習ランの一個抜き残差）。
    """
    length = min(lat.shape[0] for lat in fit_latents)
    aligned = np.stack([lat[:length] for lat in fit_latents])
    track = np.mean(aligned, axis=0)
    grand_mean = np.mean(np.vstack(fit_latents), axis=0)

    def residual(latent: np.ndarray, centre: np.ndarray) -> np.ndarray:
        return latent - _track_rows(centre, np.arange(latent.shape[0]))

    residuals = [residual(lat, track) for lat in reference_latents]
    if len(fit_latents) > 1:
        for i, lat in enumerate(fit_latents):
            others = np.mean(np.delete(aligned, i, axis=0), axis=0)
            residuals.append(residual(lat, others))

    pooled = np.vstack(residuals)
    spread = np.sqrt(np.mean(pooled * pooled, axis=0))
    spread = np.where(spread < STD_FLOOR, STD_FLOOR, spread)
    quantile = max(
        float(np.quantile(np.sqrt(np.sum((r / spread) ** 2, axis=1)), config.score_quantile))
        for r in residuals
    )
    scale = max(1.0, quantile / config.score_target)
    return track, grand_mean, spread * scale, scale


def fit_monitor(baseline_runs: Sequence, config: Optional[MonitorConfig] = None) -> MonitorModel:
    """非摂動ランからモニターを学習（truncated BPTT + Adam、参照ランで早期終了）

    末尾の reference_runs 本は学習に使わず、早期終了の判定と基準統計の較正にだけ使う。
    """
    config = config or MonitorConfig()
    streams = [_as_matrix(s) for s in baseline_runs]
    if len(streams) < config.min_runs:
        raise MonitorTrainingError(
            f"monitor needs at least {config.min_runs} baseline runs, got {len(streams)}"
        )
    short = [s.shape[0] for s in streams if s.shape[0] < config.min_steps]
    if short:
        raise MonitorTrainingError(
            f"every baseline run needs at least {config.min_steps} steps, got runs of {short}"
        )

    pooled = np.vstack(streams)
    finite = np.all(np.isfinite(pooled), axis=1)
    norm = NormStats.fit(pooled[finite] if np.any(finite) else np.zeros_like(pooled))
    normalized = [_normalize_stream(s, norm) for s in streams]
    split = len(streams) - config.reference_runs
    training, holdout = normalized[:split], normalized[split:]

    k = config.latent_dim
    m = len(MONITOR_CHANNELS)
    rng = stream_rng(config.seed, STREAM_MONITOR)
    A = rng.uniform(-0.5, 0.5, size=(k, k)) / np.sqrt(k)
    B = rng.uniform(-1.0, 1.0, size=(k, m)) / np.sqrt(m)
    C = rng.uniform(-1.0, 1.0, size=(m, k)) / np.sqrt(k)

    sizes = (k * k, k * m, m * k)
    optimizer = Adam(beta1=0.9, beta2=0.999, eps=1e-8)
    opt_state = optimizer.init_state(sum(sizes))
    opt_step = 0
    history: List[float] = []
    holdout_history: List[float] = []
    best = (A.copy(), B.copy(), C.copy())
    best_epoch = 0
    best_loss = float("inf")

    for epoch in range(1, config.epochs + 1):
        for Y in training:
            h = np.zeros(k)
            for start in range(0, Y.shape[0], config.bptt_window):
                window = Y[start:start + config.bptt_window]
                _, dA, dB, dC, h = monitor_loss_and_grads(A, B, C, window, h)
                grad = np.concatenate([dA.ravel(), dB.ravel(), dC.ravel()])
                norm_g = float(np.linalg.norm(grad))
                if norm_g > config.clip_grad_norm:
                    grad = grad * (config.clip_grad_norm / norm_g)
                opt_step += 1
                update = optimizer.compute_update(grad, opt_state, config.lr, opt_step)
                A = A + update[:sizes[0]].reshape(k, k)
                B = B + update[sizes[0]:sizes[0] + sizes[1]].reshape(k, m)
                C = C + update[sizes[0] + sizes[1]:].reshape(m, k)
        # スペクトルクランプ
        sigma_max = float(np.linalg.norm(A, 2))
        if sigma_max > 1.0:
            A = A / sigma_max
        history.append(_mean_loss(A, B, C, training))
        holdout_history.append(_mean_loss(A, B, C, holdout))
        if holdout_history[-1] < best_loss:
            best, best_epoch, best_loss = (A.copy(), B.copy(), C.copy()), epoch, holdout_history[-1]
        elif epoch - best_epoch >= config.patience:
            break

    A, B, C = best
    model = MonitorModel(
        A=A, B=B, C=C,
        norm_stats=norm,
        baseline_mean=np.zeros(k),
        baseline_std=np.ones(k),
        epochs=len(history),
        best_epoch=best_epoch,
        final_loss=best_loss,
        seed=config.seed,
        loss_history=history,
        holdout_history=holdout_history,
    )
    latents = [encode_stream(model, s) for s in streams]
    track, grand_mean, spread, scale = _reference_statistics(latents[:split], latents[split:], config)
    model.baseline_track = track
    model.baseline_mean = grand_mean
    model.baseline_std = spread
    model.score_scale = scale
    return model


_MODEL_HEADER = struct.Struct("<4sHHHIIddQI")
_LEN = struct.Struct("<I")
_CRC = struct.Struct("<I")


def serialize_model(model: MonitorModel) -> bytes:
    """SBMM バイナリに直列化"""
    k, m = model.latent_dim, model.input_dim
    channels = json.dumps(list(model.channels)).encode("utf-8")
    parts = [
        _MODEL_HEADER.pack(MODEL_MAGIC, MODEL_VERSION, k, m, model.epochs, model.best_epoch,
                           model.final_loss, model.score_scale, model.seed, model.track_length),
        _LEN.pack(len(channels)),
        channels,
    ]
    arrays = [model.A, model.B, model.C, model.norm_stats.mean, model.norm_stats.std,
              model.baseline_mean, model.baseline_std]
    if model.baseline_track is not None:
        arrays.append(model.baseline_track)
    for arr in arrays:
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    parts.append(model.norm_stats.degenerate.astype(np.uint8).tobytes())
    body = b"".join(parts)
    return body + _CRC.pack(zlib.crc32(body))


def restore_model(blob: bytes) -> MonitorModel:
    """SBMM バイナリから復元"""
    if len(blob) < _MODEL_HEADER.size + _LEN.size + _CRC.size:
        raise CheckpointCorruptionError("monitor blob truncated")
    body, (crc,) = blob[:-_CRC.size], _CRC.unpack(blob[-_CRC.size:])
    if zlib.crc32(body) != crc:
        raise CheckpointCorruptionError("monitor blob checksum mismatch")
    magic, version, k, m, epochs, best_epoch, final_loss, score_scale, seed, track_len = \
        _MODEL_HEADER.unpack_from(body, 0)
    if magic != MODEL_MAGIC or version != MODEL_VERSION:
        raise CheckpointCorruptionError(f"unsupported monitor blob {magic!r} v{version}")
    offset = _MODEL_HEADER.size
    (n_chan,) = _LEN.unpack_from(body, offset)
    offset += _LEN.size
    channels = tuple(json.loads(body[offset:offset + n_chan].decode("utf-8")))
    offset += n_chan

    def take(shape: Tuple[int, ...]) -> np.ndarray:
        nonlocal offset
        size = int(np.prod(shape)) * 8
        if offset + size > len(body):
            raise CheckpointCorruptionError("monitor blob truncated inside an array")
        arr = np.frombuffer(body[offset:offset + size], dtype="<f8").astype(np.float64).reshape(shape)
        offset += size
        return arr

    A, B, C = take((k, k)), take((k, m)), take((m, k))
    mean, std = take((m,)), take((m,))
    b_mean, b_std = take((k,)), take((k,))
    track = take((track_len, k)) if track_len else None
    if offset + m != len(body):
        raise CheckpointCorruptionError("monitor blob has inconsistent length")
    degenerate = np.frombuffer(body[offset:offset + m], dtype=np.uint8).astype(bool)
    return MonitorModel(
        A=A, B=B, C=C,
        norm_stats=NormStats(mean, std, degenerate),
        baseline_mean=b_mean,
        baseline_std=b_std,
        baseline_track=track,
        channels=channels,
        epochs=epochs,
        best_epoch=best_epoch,
        final_loss=final_loss,
        score_scale=score_scale,
        seed=seed,
    )


def serialize_latents(latents: np.ndarray, config_hash: str) -> bytes:
    """SBLT 潜在軌跡（ヘッダ + kごとのfloat64フレーム）"""
    n, k = latents.shape
    header = struct.pack("<4sHHQ16s", LATENT_MAGIC, LATENT_VERSION, k, n, config_hash.encode("ascii")[:16])
    return header + np.ascontiguousarray(latents, dtype="<f8").tobytes()


def restore_latents(blob: bytes) -> Tuple[np.ndarray, str]:
    size = struct.calcsize("<4sHHQ16s")
    if len(blob) < size:
        raise CheckpointCorruptionError("latent file truncated")
    magic, version, k, n, digest = struct.unpack_from("<4sHHQ16s", blob, 0)
    if magic != LATENT_MAGIC or version != LATENT_VERSION:
        raise CheckpointCorruptionError(f"unsupported latent file {magic!r} v{version}")
    if len(blob) != size + 8 * k * n:
        raise CheckpointCorruptionError("latent file has inconsistent length")
    latents = np.frombuffer(blob[size:], dtype="<f8").astype(np.float64).reshape(n, k)
    return latents, digest.rstrip(b"\x00").decode("ascii")
