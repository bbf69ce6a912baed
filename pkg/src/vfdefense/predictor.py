"""Action-conditioned frame prediction: conv encoder over the last 4
frames (plus one-hot action planes for the 3 older actions), a factorized
multiplicative transform conditioned on the newest action, and a deconv
decoder back to a frame. Also the action-free autoencoder baseline.

Prediction runs in preprocessed (mean-centered) space; frames are clamped
to [0, 1] after un-centering.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nets
from .envs import GRID, action_count, env_reset, env_step
from .nets import AdamState, DTYPE, Network, adam_step
from .policy import (
    FrameStack,
    STACK_SIZE,
    action_distribution,
    preprocess,
    select_action,
    unpreprocess,
)

HISTORY = STACK_SIZE  # m = 4 frames and actions of history


class PredictorError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# dataset


@dataclass
class Episode:
    frames: np.ndarray  # (T, 16, 16) float32, raw pixel space
    actions: np.ndarray  # (T,) int64, action taken after observing frame t


@dataclass
class PredictionDataset:
    env: str
    n_actions: int
    train: list
    val: list
    test: list

    def split(self, tag):
        return {"train": self.train, "val": self.val, "test": self.test}[tag]


def collect_dataset(policy, env, frames, epsilon=0.3, seed=0):
    """Roll out the trained policy with epsilon-greedy exploration until
    `frames` total frames are recorded; 90/5/5 split by episode."""
    rng = np.random.Generator(np.random.PCG64(seed))
    episodes = []
    total = 0
    while total < frames:
        state, frame = env_reset(env, int(rng.integers(0, 2**63)))
        stack = FrameStack(frame)
        ep_frames = [frame]
        ep_actions = []
        while True:
            dist = action_distribution(policy, stack)
            action = select_action(dist, "epsilon", rng, epsilon)
            ep_actions.append(action)
            state, result = env_step(state, action)
            stack.push(result.frame)
            if result.done or total + len(ep_frames) >= frames:
                break
            ep_frames.append(result.frame)
        episodes.append(
            Episode(
                frames=np.stack(ep_frames).astype(np.float32),
                actions=np.asarray(ep_actions[: len(ep_frames)], dtype=np.int64),
            )
        )
        total += len(ep_frames)
    n = len(episodes)
    n_val = max(1, n // 20)
    n_test = max(1, n // 20)
    n_train = max(1, n - n_val - n_test)
    return PredictionDataset(
        env=env,
        n_actions=action_count(env),
        train=episodes[:n_train],
        val=episodes[n_train : n_train + n_val],
        test=episodes[n_train + n_val :],
    )


def save_dataset(dataset, out_dir):
    """JSON-lines trajectory file plus an index of episode extents."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    from .envs import write_trajectory

    line = 0
    index = [f"env={dataset.env}", f"actions={dataset.n_actions}"]
    with open(os.path.join(out_dir, "data.jsonl"), "w") as fh:
        for tag in ("train", "val", "test"):
            for ep in dataset.split(tag):
                count = len(ep.frames)
                steps = (
                    (t, ep.actions[t], 0.0, t == count - 1, ep.frames[t])
                    for t in range(count)
                )
                write_trajectory(fh, steps)
                index.append(f"{line} {count} {tag}")
                line += count
    with open(os.path.join(out_dir, "index.txt"), "w") as fh:
        fh.write("\n".join(index) + "\n")


def load_dataset(out_dir):
    import os

    from .envs import read_trajectory

    with open(os.path.join(out_dir, "index.txt")) as fh:
        lines = [line.strip() for line in fh if line.strip()]
    env = lines[0].split("=", 1)[1]
    n_actions = int(lines[1].split("=", 1)[1])
    extents = [line.split() for line in lines[2:]]
    with open(os.path.join(out_dir, "data.jsonl")) as fh:
        records = list(read_trajectory(fh))
    splits = {"train": [], "val": [], "test": []}
    for start, count, tag in extents:
        start, count = int(start), int(count)
        chunk = records[start : start + count]
        splits[tag].append(
            Episode(
                frames=np.stack([r[4] for r in chunk]).astype(np.float32),
                actions=np.asarray([r[1] for r in chunk], dtype=np.int64),
            )
        )
    return PredictionDataset(env=env, n_actions=n_actions, **splits)


# ---------------------------------------------------------------------------
# model


@dataclass
class ActionTransform:
    """Factorized multiplicative conditioning: the encoded feature is
    modulated by a per-action factor vector before decoding."""

    w_enc: np.ndarray  # (f, n)
    w_a: np.ndarray  # (f, |A|)
    w_dec: np.ndarray  # (n, f)
    b: np.ndarray  # (n,)

    @classmethod
    def create(cls, n, f, n_actions, rng):
        def init(rows, cols):
            return (rng.standard_normal((rows, cols)) * np.sqrt(1.0 / cols)).astype(
                DTYPE
            )

        return cls(
            w_enc=init(f, n),
            w_a=init(f, n_actions),
            w_dec=init(n, f),
            b=np.zeros(n, dtype=DTYPE),
        )

    def params(self):
        return {"w_enc": self.w_enc, "w_a": self.w_a, "w_dec": self.w_dec,
                "b": self.b}

    def set_params(self, named):
        self.w_enc = named["w_enc"].astype(DTYPE)
        self.w_a = named["w_a"].astype(DTYPE)
        self.w_dec = named["w_dec"].astype(DTYPE)
        self.b = named["b"].astype(DTYPE)

    def forward(self, h, onehot):
        """h: (N, n), onehot: (N, |A|) -> (out (N, n), cache)."""
        fe = h @ self.w_enc.T
        fa = onehot @ self.w_a.T
        prod = fe * fa
        out = prod @ self.w_dec.T + self.b
        return out, (h, onehot, fe, fa, prod)

    def backward(self, dout, cache):
        h, onehot, fe, fa, prod = cache
        grads = {
            "w_dec": dout.T @ prod,
            "b": dout.sum(axis=0),
        }
        dprod = dout @ self.w_dec
        dfe = dprod * fa
        dfa = dprod * fe
        grads["w_enc"] = dfe.T @ h
        grads["w_a"] = dfa.T @ onehot
        dh = dfe @ self.w_enc
        return dh, grads

    def copy(self):
        return ActionTransform(
            self.w_enc.copy(), self.w_a.copy(), self.w_dec.copy(), self.b.copy()
        )


@dataclass
class PredictorModel:
    encoder: Network
    transform: ActionTransform | None  # None for the autoencoder baseline
    decoder: Network
    n_actions: int
    mean_pixel: float
    env: str

    def named_params(self):
        out = {f"enc.{k}": v for k, v in self.encoder.named_params().items()}
        if self.transform is not None:
            out.update({f"xf.{k}": v for k, v in self.transform.params().items()})
        out.update({f"dec.{k}": v for k, v in self.decoder.named_params().items()})
        return out

    def set_params(self, named):
        self.encoder.set_params(
            {k[4:]: v for k, v in named.items() if k.startswith("enc.")}
        )
        if self.transform is not None:
            self.transform.set_params(
                {k[3:]: v for k, v in named.items() if k.startswith("xf.")}
            )
        self.decoder.set_params(
            {k[4:]: v for k, v in named.items() if k.startswith("dec.")}
        )

    def copy(self):
        return PredictorModel(
            encoder=self.encoder.copy(),
            transform=None if self.transform is None else self.transform.copy(),
            decoder=self.decoder.copy(),
            n_actions=self.n_actions,
            mean_pixel=self.mean_pixel,
            env=self.env,
        )


@dataclass
class CurriculumPhase:
    horizon: int
    learning_rate: float
    batch_size: int
    iterations: int


DEFAULT_PHASES = (
    CurriculumPhase(1, 3e-4, 32, 20_000),
    CurriculumPhase(3, 1e-5, 8, 5_000),
    CurriculumPhase(5, 1e-5, 8, 5_000),
)
DEFAULT_SNAPSHOT_MARKS = (1_000, 2_000, 4_000, 8_000, 16_000, 30_000)

FEATURE_SIZE = 256
FACTOR_SIZE = 128


def _encoder_channels(n_actions, conditioned):
    # 4 frame planes plus one-hot planes for the 3 older actions
    return HISTORY + (HISTORY - 1) * n_actions if conditioned else 1


def build_predictor(env, mean_pixel, seed, conditioned=True):
    n_actions = action_count(env)
    rng = np.random.Generator(np.random.PCG64(seed))
    cin = _encoder_channels(n_actions, conditioned)
    # Stride-1 valid convolutions first so sprite motion is computed with
    # shared weights at full resolution; the strided convolution then packs
    # a 4x4 spatial map whose 16 channels address sub-positions, which the
    # kernel-4 deconvolution in the decoder can unpack block-locally. The
    # geometry (16 -> 12 via two 3x3 convs, then kernel 6 stride 2) gives
    # code cell j a receptive field of original columns 2j..2j+9, so every
    # 4-pixel decoder block sees at least a 2-pixel margin beyond its own
    # extent -- enough to carry sprite velocity across block boundaries.
    encoder = Network(
        (cin, GRID, GRID),
        [
            nets.Conv2d(cin, 32, 3, 1, rng=rng),
            nets.Relu(),
            nets.Conv2d(32, 32, 3, 1, rng=rng),
            nets.Relu(),
            nets.Conv2d(32, 16, 6, 2, rng=rng),
            nets.Reshape((FEATURE_SIZE,)),
        ],
    )
    if conditioned:
        transform = ActionTransform.create(
            FEATURE_SIZE, FACTOR_SIZE, n_actions, rng
        )
        # Near-identity start: orthonormal factor projection with its own
        # transpose as the inverse, action factors at ~1 so the gate is
        # neutral until trained. Keeps the bottleneck from scrambling the
        # spatial code early on.
        q, _ = np.linalg.qr(rng.standard_normal((FEATURE_SIZE, FACTOR_SIZE)))
        transform.w_enc = q.T.astype(DTYPE)
        transform.w_dec = q.astype(DTYPE)
        transform.w_a = (
            1.0 + 0.01 * rng.standard_normal((FACTOR_SIZE, n_actions))
        ).astype(DTYPE)
    else:
        transform = None
    decoder = Network(
        (FEATURE_SIZE,),
        [
            nets.Reshape((16, 4, 4)),
            nets.Deconv2d(16, 16, 4, rng=rng),
            nets.Relu(),
            nets.Conv2d(16, 1, 1, 1, rng=rng),
        ],
    )
    return PredictorModel(
        encoder=encoder,
        transform=transform,
        decoder=decoder,
        n_actions=n_actions,
        mean_pixel=mean_pixel,
        env=env,
    )


def _onehot(actions, n_actions):
    actions = np.asarray(actions, dtype=np.int64)
    out = np.zeros(actions.shape + (n_actions,), dtype=DTYPE)
    np.put_along_axis(out, actions[..., None], 1.0, axis=-1)
    return out


def _encoder_input(model, frames, actions):
    """frames: (N, 4, 16, 16) preprocessed; actions: (N, 4) ints.
    Builds frame planes plus constant one-hot planes for the older 3
    actions; the newest action conditions the multiplicative transform."""
    n = frames.shape[0]
    planes = [frames]
    older = _onehot(actions[:, : HISTORY - 1], model.n_actions)  # (N, 3, |A|)
    planes.append(
        np.broadcast_to(
            older.reshape(n, (HISTORY - 1) * model.n_actions, 1, 1),
            (n, (HISTORY - 1) * model.n_actions, GRID, GRID),
        ).astype(DTYPE)
    )
    return np.concatenate(planes, axis=1)


def _predict_batch(model, frames, actions, with_cache=False):
    """Preprocessed frames (N,4,16,16) + actions (N,4) -> predicted
    preprocessed frames (N,16,16) (and caches when training)."""
    x = _encoder_input(model, frames, actions)
    h, enc_cache = model.encoder._forward_cached(x)
    if model.transform is not None:
        newest = _onehot(actions[:, HISTORY - 1], model.n_actions)
        hd, xf_cache = model.transform.forward(h, newest)
    else:
        hd, xf_cache = h, None
    out, dec_cache = model.decoder._forward_cached(hd)
    pred = out[:, 0]  # (N, 16, 16)
    if with_cache:
        return pred, (enc_cache, xf_cache, dec_cache)
    return pred


def _backward_batch(model, dpred, caches):
    enc_cache, xf_cache, dec_cache = caches
    dout = dpred[:, None]  # channel axis
    dhd, dec_grads = model.decoder.backward(dout, dec_cache)
    grads = {f"dec.{k}": v for k, v in dec_grads.items()}
    if model.transform is not None:
        dh, xf_grads = model.transform.backward(dhd, xf_cache)
        grads.update({f"xf.{k}": v for k, v in xf_grads.items()})
    else:
        dh = dhd
    _, enc_grads = model.encoder.backward(dh, enc_cache)
    grads.update({f"enc.{k}": v for k, v in enc_grads.items()})
    return grads


def predict_frame(model, history, actions):
    """history: 4 raw frames oldest-first; actions: the 4 actions taken
    after each. Returns the predicted next raw frame, clamped to [0,1]."""
    frames = preprocess(np.stack(history)[None], model.mean_pixel)
    acts = np.asarray(actions, dtype=np.int64)[None]
    pred = _predict_batch(model, frames, acts)[0]
    return np.clip(unpreprocess(pred, model.mean_pixel), 0.0, 1.0)


def rollout_k(model, history_frames, history_actions, future_actions):
    """Autoregressive k-step prediction (k = len(future_actions)).

    history_frames: the 4 most recent frames; history_actions: the 3
    actions taken between them; future_actions: the k actions executed
    from the newest history frame onward. With k=1 this is bit-identical
    to predict_frame on (history_frames, history_actions + future_actions).
    Each prediction is appended to the window for the next step.
    """
    if len(future_actions) < 1:
        raise PredictorError("rollout needs at least one action")
    frames = [np.asarray(f, dtype=np.float32) for f in history_frames[-HISTORY:]]
    actions = [int(a) for a in history_actions][-(HISTORY - 1):]
    preds = []
    for a in future_actions:
        pred = predict_frame(model, frames[-HISTORY:],
                             actions[-(HISTORY - 1):] + [int(a)])
        preds.append(pred)
        frames.append(pred)
        actions.append(int(a))
    return preds


def reconstruct(model, frame):
    """Autoencoder baseline inference: single frame in, frame out."""
    if model.transform is not None:
        raise PredictorError("reconstruct expects the action-free baseline")
    x = preprocess(np.asarray(frame)[None, None], model.mean_pixel)
    h = model.encoder.forward(x)
    out = model.decoder.forward(h)[:, 0]
    return np.clip(unpreprocess(out[0], model.mean_pixel), 0.0, 1.0)


# ---------------------------------------------------------------------------
# training


def _sample_windows(episodes, horizon, batch_size, rng):
    """Sample (frames (N,4+k,16,16), actions (N,4+k-1)) windows, contiguous
    within an episode."""
    need = HISTORY + horizon
    eligible = [ep for ep in episodes if len(ep.frames) >= need]
    if not eligible:
        raise PredictorError(f"no episode long enough for horizon {horizon}")
    frames = np.empty((batch_size, need, GRID, GRID), dtype=np.float32)
    actions = np.empty((batch_size, need - 1), dtype=np.int64)
    for i in range(batch_size):
        ep = eligible[int(rng.integers(0, len(eligible)))]
        start = int(rng.integers(0, len(ep.frames) - need + 1))
        frames[i] = ep.frames[start : start + need]
        actions[i] = ep.actions[start : start + need - 1]
    return frames, actions


def _window_loss_and_grads(model, frames, actions, horizon):
    """Mean per-pixel squared error over a k-step rollout, plus parameter
    gradients. Multi-step gradients are truncated at each prediction:
    earlier predicted frames are treated as constants when they re-enter
    the input window."""
    pre = preprocess(frames, model.mean_pixel)
    n = frames.shape[0]
    hist = pre[:, :HISTORY].copy()
    total_loss = 0.0
    grand = None
    denom = horizon * n * GRID * GRID
    for k in range(horizon):
        acts = actions[:, k : k + HISTORY]
        pred, caches = _predict_batch(model, hist, acts, with_cache=True)
        target = pre[:, HISTORY + k]
        diff = pred.astype(np.float64) - target.astype(np.float64)
        total_loss += float((diff**2).sum())
        dpred = (2.0 * diff / denom).astype(DTYPE)
        grads = _backward_batch(model, dpred, caches)
        if grand is None:
            grand = grads
        else:
            for key in grand:
                grand[key] += grads[key]
        if k + 1 < horizon:
            hist = np.concatenate([hist[:, 1:], pred[:, None]], axis=1)
    return total_loss / denom, grand


def validation_mse(model, episodes, horizon=1, max_windows=256, seed=123):
    """Mean per-pixel squared prediction error (raw pixel space, clamped
    predictions) over sampled windows of a split."""
    rng = np.random.Generator(np.random.PCG64(seed))
    frames, actions = _sample_windows(episodes, horizon, max_windows, rng)
    total = 0.0
    count = 0
    for i in range(frames.shape[0]):
        preds = rollout_k(
            model,
            list(frames[i, :HISTORY]),
            list(actions[i, : HISTORY - 1]),
            list(actions[i, HISTORY - 1 : HISTORY - 1 + horizon]),
        )
        for k, pred in enumerate(preds):
            diff = pred.astype(np.float64) - frames[i, HISTORY + k]
            total += float((diff**2).mean())
            count += 1
    return total / count


def train_predictor(dataset, phases=DEFAULT_PHASES, seed=0, mean_pixel=None,
                    snapshot_marks=DEFAULT_SNAPSHOT_MARKS):
    """Curriculum training over increasing horizons; returns the trained
    model plus (iteration mark, snapshot model) pairs for the quality
    study."""
    horizons = [p.horizon for p in phases]
    if horizons != sorted(horizons):
        raise PredictorError("curriculum phases must have increasing horizons")
    if mean_pixel is None:
        mean_pixel = float(
            np.mean([ep.frames.mean() for ep in dataset.train])
        )
    model = build_predictor(dataset.env, mean_pixel, seed, conditioned=True)
    return _run_training(model, dataset, phases, seed, snapshot_marks)


def _run_training(model, dataset, phases, seed, snapshot_marks):
    rng = np.random.Generator(np.random.PCG64(seed + 1))
    opt = AdamState()
    snapshots = []
    marks = sorted(snapshot_marks)
    done_iters = 0
    loss_log = []
    for phase in phases:
        for _ in range(phase.iterations):
            frames, actions = _sample_windows(
                dataset.train, phase.horizon, phase.batch_size, rng
            )
            loss, grads = _window_loss_and_grads(
                model, frames, actions, phase.horizon
            )
            if not np.isfinite(loss):
                raise PredictorError(f"training diverged at iter {done_iters}")
            adam_step(model.named_params(), grads, opt, phase.learning_rate)
            done_iters += 1
            loss_log.append(loss)
            if marks and done_iters == marks[0]:
                snapshots.append((done_iters, model.copy()))
                marks.pop(0)
    if marks and done_iters > 0:
        # marks beyond the configured iteration budget snapshot the final model
        for mark in marks:
            snapshots.append((done_iters, model.copy()))
            break
    return model, snapshots, loss_log


@dataclass
class AutoencoderConfig:
    iterations: int = 20_000
    learning_rate: float = 3e-4
    batch_size: int = 32
    log_every: int = 500


def train_autoencoder(dataset, config=None, seed=0, mean_pixel=None):
    """Action-free reconstruction baseline: same encoder/decoder stack,
    no multiplicative transform, single-frame input and target."""
    if config is None:
        config = AutoencoderConfig()
    if mean_pixel is None:
        mean_pixel = float(np.mean([ep.frames.mean() for ep in dataset.train]))
    model = build_predictor(dataset.env, mean_pixel, seed, conditioned=False)
    rng = np.random.Generator(np.random.PCG64(seed + 1))
    opt = AdamState()
    all_frames = np.concatenate([ep.frames for ep in dataset.train], axis=0)
    curve = []
    for it in range(1, config.iterations + 1):
        idx = rng.integers(0, len(all_frames), size=config.batch_size)
        batch = preprocess(all_frames[idx][:, None], mean_pixel)
        h, enc_cache = model.encoder._forward_cached(batch)
        out, dec_cache = model.decoder._forward_cached(h)
        diff = out[:, 0].astype(np.float64) - batch[:, 0].astype(np.float64)
        denom = batch.shape[0] * GRID * GRID
        loss = float((diff**2).sum()) / denom
        dpred = (2.0 * diff / denom).astype(DTYPE)
        dh, dec_grads = model.decoder.backward(dpred[:, None], dec_cache)
        _, enc_grads = model.encoder.backward(dh, enc_cache)
        grads = {f"dec.{k}": v for k, v in dec_grads.items()}
        grads.update({f"enc.{k}": v for k, v in enc_grads.items()})
        if not np.isfinite(loss):
            raise PredictorError(f"autoencoder diverged at iter {it}")
        adam_step(model.named_params(), grads, opt, config.learning_rate)
        if it % config.log_every == 0:
            curve.append((it, loss))
    return model, curve


# ---------------------------------------------------------------------------
# checkpointing


def save_predictor(model, path):
    import struct

    with open(path, "wb") as fh:
        fh.write(nets.MAGIC)
        conditioned = model.transform is not None
        header = (
            f"predictor env={model.env} actions={model.n_actions} "
            f"mean={model.mean_pixel!r} conditioned={int(conditioned)}"
        )
        nets._write_text(fh, header)
        nets.save_network(model.encoder, fh)
        if conditioned:
            for name in ("w_enc", "w_a", "w_dec", "b"):
                block = np.ascontiguousarray(
                    model.transform.params()[name], dtype="<f4"
                )
                nets._write_text(fh, f"{name} {' '.join(map(str, block.shape))}")
                fh.write(struct.pack("<Q", block.size))
                fh.write(block.tobytes())
        nets.save_network(model.decoder, fh)


def load_predictor(path):
    import struct

    with open(path, "rb") as fh:
        if fh.read(4) != nets.MAGIC:
            raise PredictorError("bad predictor checkpoint magic")
        header = nets._read_text(fh).split()
        fields = dict(part.split("=", 1) for part in header[1:])
        encoder = nets.load_network(fh)
        transform = None
        if int(fields["conditioned"]):
            blocks = {}
            for _ in range(4):
                desc = nets._read_text(fh).split()
                name, shape = desc[0], tuple(int(s) for s in desc[1:])
                (size,) = struct.unpack("<Q", fh.read(8))
                blocks[name] = np.frombuffer(
                    fh.read(size * 4), dtype="<f4"
                ).reshape(shape).astype(DTYPE)
            transform = ActionTransform(
                blocks["w_enc"], blocks["w_a"], blocks["w_dec"], blocks["b"]
            )
        decoder = nets.load_network(fh)
    return PredictorModel(
        encoder=encoder,
        transform=transform,
        decoder=decoder,
        n_actions=int(fields["actions"]),
        mean_pixel=float(fields["mean"]),
        env=fields["env"],
    )
