"""Toy flow-matching action policy on a planar place task.

The policy predicts an action chunk (H gripper displacements) for a
2-D world: move to the object, grab it, carry it to the goal. A small
fully-connected velocity field is trained with the conditional
flow-matching objective — regress the field evaluated at the linear
interpolant ``A_tau = (1-tau)*eps + tau*A`` onto the path derivative
``A - eps`` — and sampled by Euler integration from Gaussian noise over
``tau: 0 -> 1`` (three steps by default).

Everything is float64 numpy with hand-written reverse-mode gradients
(two tanh hidden layers), so the analytic gradient can be checked
coordinate-by-coordinate against central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .canon import canonical_dumps, digest
from .errors import NumericalError, SchemaError, ShapeError
from .records import Instruction, Trajectory
from .rng import mix64
from .simenv import FORWARD, Outcome

STATE_DIM = 7  # gripper xy, object xy, goal xy, holding flag


@dataclass
class PlanarConfig:
    chunk_len: int = 8
    max_step: float = 0.08
    grab_radius: float = 0.03
    success_radius: float = 0.05
    n_tags: int = 1  # one-hot task tag appended to the state encoding
    hidden: int = 64

    @property
    def state_dim(self) -> int:
        return STATE_DIM + self.n_tags

    @property
    def action_dim(self) -> int:
        return self.chunk_len * 2


@dataclass
class PlanarState:
    gripper: np.ndarray
    obj: np.ndarray
    goal: np.ndarray
    holding: bool

    def encode(self, cfg: PlanarConfig, tag: int = 0) -> np.ndarray:
        onehot = np.zeros(cfg.n_tags)
        onehot[tag] = 1.0
        return np.concatenate(
            [self.gripper, self.obj, self.goal, [1.0 if self.holding else 0.0], onehot]
        )


class PlanarWorld:
    """Unit-square world: the gripper moves by bounded displacements,
    grabs the object on contact, and carries it while holding."""

    def __init__(self, cfg: PlanarConfig, gripper, obj, goal):
        self.cfg = cfg
        self.gripper = np.asarray(gripper, dtype=float)
        self.obj = np.asarray(obj, dtype=float)
        self.goal = np.asarray(goal, dtype=float)
        self.holding = False

    @classmethod
    def random(cls, cfg: PlanarConfig, rng: np.random.Generator) -> "PlanarWorld":
        draw = lambda: rng.uniform(0.1, 0.9, size=2)
        return cls(cfg, draw(), draw(), draw())

    def state(self) -> PlanarState:
        return PlanarState(self.gripper.copy(), self.obj.copy(), self.goal.copy(), self.holding)

    def step(self, action: np.ndarray) -> None:
        action = np.asarray(action, dtype=float)
        norm = float(np.linalg.norm(action))
        if norm > self.cfg.max_step:
            action = action * (self.cfg.max_step / norm)
        self.gripper = np.clip(self.gripper + action, 0.0, 1.0)
        if self.holding:
            self.obj = self.gripper.copy()
        elif np.linalg.norm(self.gripper - self.obj) < self.cfg.grab_radius:
            self.holding = True
            self.obj = self.gripper.copy()

    def success(self) -> bool:
        return float(np.linalg.norm(self.obj - self.goal)) < self.cfg.success_radius


def _clip_step(delta: np.ndarray, max_step: float) -> np.ndarray:
    norm = float(np.linalg.norm(delta))
    if norm > max_step:
        return delta * (max_step / norm)
    return delta


def expert_demo(cfg: PlanarConfig, rng: np.random.Generator, max_steps: int = 200):
    """Scripted proportional controller, sliced into (state, chunk)
    pairs; the last chunk is zero-padded to length H."""
    world = PlanarWorld.random(cfg, rng)
    states: list[PlanarState] = []
    actions: list[np.ndarray] = []
    steps = 0
    while not world.success() and steps < max_steps:
        target = world.goal if world.holding else world.obj
        action = _clip_step(target - world.gripper, cfg.max_step)
        states.append(world.state())
        world.step(action)
        actions.append(action)
        steps += 1
    chunks = []
    H = cfg.chunk_len
    for start in range(0, len(actions), H):
        chunk = np.zeros((H, 2))
        piece = actions[start : start + H]
        chunk[: len(piece)] = np.stack(piece)
        chunks.append((states[start], chunk))
    return chunks, world


def make_demos(n_demos: int, cfg: PlanarConfig, seed: int):
    """n seeded expert episodes, flattened into (state_enc, chunk) pairs."""
    samples = []
    episodes = []
    for i in range(n_demos):
        rng = np.random.default_rng(mix64(seed, i))
        chunks, world = expert_demo(cfg, rng)
        episodes.append((chunks, world))
        for state, chunk in chunks:
            samples.append((state.encode(cfg), chunk))
    return samples, episodes


# -- velocity field -----------------------------------------------------------

def init_params(cfg: PlanarConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    in_dim = cfg.action_dim + 1 + cfg.state_dim
    h = cfg.hidden
    out_dim = cfg.action_dim

    def layer(n_in, n_out):
        return rng.standard_normal((n_in, n_out)) / np.sqrt(n_in)

    return {
        "W1": layer(in_dim, h),
        "b1": np.zeros(h),
        "W2": layer(h, h),
        "b2": np.zeros(h),
        "W3": layer(h, out_dim),
        "b3": np.zeros(out_dim),
    }


_PARAM_ORDER = ("W1", "b1", "W2", "b2", "W3", "b3")


def pack_params(params: dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([params[k].ravel() for k in _PARAM_ORDER])


def unpack_params(flat: np.ndarray, like: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    out = {}
    pos = 0
    for k in _PARAM_ORDER:
        size = like[k].size
        out[k] = flat[pos : pos + size].reshape(like[k].shape).copy()
        pos += size
    return out


def _check_finite(*arrays) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericalError("non-finite values in computation")


def net_forward(params: dict, X: np.ndarray):
    Z1 = X @ params["W1"] + params["b1"]
    H1 = np.tanh(Z1)
    Z2 = H1 @ params["W2"] + params["b2"]
    H2 = np.tanh(Z2)
    Y = H2 @ params["W3"] + params["b3"]
    return Y, (X, H1, H2)


def net_backward(params: dict, cache, dY: np.ndarray) -> dict[str, np.ndarray]:
    X, H1, H2 = cache
    dW3 = H2.T @ dY
    db3 = dY.sum(axis=0)
    dH2 = dY @ params["W3"].T
    dZ2 = dH2 * (1.0 - H2 * H2)
    dW2 = H1.T @ dZ2
    db2 = dZ2.sum(axis=0)
    dH1 = dZ2 @ params["W2"].T
    dZ1 = dH1 * (1.0 - H1 * H1)
    dW1 = X.T @ dZ1
    db1 = dZ1.sum(axis=0)
    return {"W1": dW1, "b1": db1, "W2": dW2, "b2": db2, "W3": dW3, "b3": db3}


# -- flow matching ------------------------------------------------------------

def interpolate(eps: np.ndarray, A: np.ndarray, tau: float) -> np.ndarray:
    """Linear path point between noise and the action chunk."""
    eps = np.asarray(eps, dtype=float)
    A = np.asarray(A, dtype=float)
    if eps.shape != A.shape:
        raise ShapeError(f"shape mismatch: {eps.shape} vs {A.shape}")
    if not 0.0 <= tau <= 1.0:
        raise SchemaError("tau must lie in [0,1]")
    return (1.0 - tau) * eps + tau * A


def target_velocity(eps: np.ndarray, A: np.ndarray) -> np.ndarray:
    """Time derivative of the linear path: constant in tau."""
    eps = np.asarray(eps, dtype=float)
    A = np.asarray(A, dtype=float)
    if eps.shape != A.shape:
        raise ShapeError(f"shape mismatch: {eps.shape} vs {A.shape}")
    return A - eps


def _batch_arrays(batch):
    """Normalize a batch of (state_enc, A, eps, tau) samples to arrays."""
    if isinstance(batch, tuple) and len(batch) == 4:
        states, A, eps, taus = batch
    else:
        if not batch:
            raise SchemaError("batch must be non-empty")
        states = np.stack([np.asarray(s, dtype=float) for s, _, _, _ in batch])
        A = np.stack([np.asarray(a, dtype=float) for _, a, _, _ in batch])
        eps = np.stack([np.asarray(e, dtype=float) for _, _, e, _ in batch])
        taus = np.array([t for _, _, _, t in batch], dtype=float)
    if A.shape != eps.shape or A.ndim != 3 or len(taus) != len(A) or len(states) != len(A):
        raise ShapeError("inconsistent batch shapes")
    return np.asarray(states, dtype=float), np.asarray(A, dtype=float), np.asarray(eps, dtype=float), np.asarray(taus, dtype=float)


def _field_inputs(states: np.ndarray, A_tau: np.ndarray, taus: np.ndarray) -> np.ndarray:
    B = len(taus)
    return np.concatenate([A_tau.reshape(B, -1), taus.reshape(B, 1), states], axis=1)


def fm_loss(params: dict, batch) -> float:
    """Mean squared residual between the field and the path derivative,
    summed over chunk elements (Frobenius) and averaged over the batch."""
    states, A, eps, taus = _batch_arrays(batch)
    _check_finite(pack_params(params), states, A, eps, taus)
    A_tau = (1.0 - taus)[:, None, None] * eps + taus[:, None, None] * A
    X = _field_inputs(states, A_tau, taus)
    Y, _ = net_forward(params, X)
    U = (A - eps).reshape(len(taus), -1)
    residual = Y - U
    loss = float(np.mean(np.sum(residual * residual, axis=1)))
    _check_finite(np.array([loss]))
    return loss


def fm_grad(params: dict, batch) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and its exact analytic gradient w.r.t. the field parameters."""
    states, A, eps, taus = _batch_arrays(batch)
    _check_finite(pack_params(params), states, A, eps, taus)
    B = len(taus)
    A_tau = (1.0 - taus)[:, None, None] * eps + taus[:, None, None] * A
    X = _field_inputs(states, A_tau, taus)
    Y, cache = net_forward(params, X)
    U = (A - eps).reshape(B, -1)
    residual = Y - U
    loss = float(np.mean(np.sum(residual * residual, axis=1)))
    dY = 2.0 * residual / B
    grads = net_backward(params, cache, dY)
    _check_finite(np.array([loss]), *grads.values())
    return loss, grads


def sample_chunk(params: dict, state_enc: np.ndarray, n_steps: int, rng: np.random.Generator, chunk_len: int = 8) -> np.ndarray:
    """Euler-integrate the field from Gaussian noise over tau: 0 -> 1."""
    if n_steps < 1:
        raise SchemaError("n_steps must be positive")
    _check_finite(pack_params(params))
    eps = rng.standard_normal((chunk_len, 2))
    A = eps.copy()
    dt = 1.0 / n_steps
    state_row = np.asarray(state_enc, dtype=float).reshape(1, -1)
    for k in range(n_steps):
        tau = k * dt
        X = np.concatenate([A.reshape(1, -1), [[tau]], state_row], axis=1)
        V, _ = net_forward(params, X)
        A = A + dt * V.reshape(chunk_len, 2)
    _check_finite(A)
    return A


@dataclass
class TrainConfig:
    batch_size: int = 16
    learning_rate: float = 1e-3
    steps: int = 5000
    seed: int = 0


def train(demos, planar_cfg: PlanarConfig, config: TrainConfig) -> tuple[dict, list[float]]:
    """Mini-batch gradient descent on the flow-matching objective.

    Per step: draw sample indices, per-sample tau ~ U[0,1] and
    eps ~ N(0,I), take one fixed-size gradient step. Deterministic for a
    given seed; returns the final parameters and the full loss history.
    """
    if not demos:
        raise SchemaError("need at least one demo")
    rng = np.random.default_rng(config.seed)
    params = init_params(planar_cfg, rng)
    states = np.stack([np.asarray(s, dtype=float) for s, _ in demos])
    chunks = np.stack([np.asarray(c, dtype=float) for _, c in demos])
    n = len(demos)
    history: list[float] = []
    for _ in range(config.steps):
        idx = rng.integers(0, n, size=config.batch_size)
        taus = rng.uniform(size=config.batch_size)
        eps = rng.standard_normal((config.batch_size, planar_cfg.chunk_len, 2))
        loss, grads = fm_grad(params, (states[idx], chunks[idx], eps, taus))
        for key in params:
            params[key] = params[key] - config.learning_rate * grads[key]
        history.append(loss)
    _check_finite(pack_params(params))
    return params, history


def evaluate_policy(
    params: dict,
    cfg: PlanarConfig,
    episodes: int,
    master_seed: int,
    n_steps: int = 3,
    max_chunks: int = 40,
) -> float:
    """Fraction of seeded episodes where the object ends within the
    success radius of the goal within the chunk budget."""
    hits = 0
    for episode in range(episodes):
        rng = np.random.default_rng(mix64(master_seed, episode))
        world = PlanarWorld.random(cfg, rng)
        for _ in range(max_chunks):
            if world.success():
                break
            chunk = sample_chunk(params, world.state().encode(cfg), n_steps, rng, cfg.chunk_len)
            for action in chunk:
                world.step(action)
        if world.success():
            hits += 1
    return hits / episodes


# -- persistence ---------------------------------------------------------------

FORMAT_VERSION = 1


def save_params(params: dict, cfg: PlanarConfig, path: str) -> None:
    """JSON header line + raw little-endian float64 parameter block."""
    flat = pack_params(params).astype("<f8")
    header = {
        "layer_sizes": [int(params["W1"].shape[0]), int(params["W1"].shape[1]),
                        int(params["W2"].shape[1]), int(params["W3"].shape[1])],
        "chunk_len": cfg.chunk_len,
        "count": int(flat.size),
        "version": FORMAT_VERSION,
    }
    with open(path, "wb") as f:
        f.write(canonical_dumps(header).encode("ascii") + b"\n")
        f.write(flat.tobytes())


def load_params(path: str) -> tuple[dict, dict]:
    """Returns (params, header)."""
    import json

    with open(path, "rb") as f:
        header = json.loads(f.readline())
        flat = np.frombuffer(f.read(), dtype="<f8")
    if header.get("version") != FORMAT_VERSION or flat.size != header["count"]:
        raise SchemaError("bad parameter file")
    in_dim, h1, h2, out_dim = header["layer_sizes"]
    like = {
        "W1": np.zeros((in_dim, h1)),
        "b1": np.zeros(h1),
        "W2": np.zeros((h1, h2)),
        "b2": np.zeros(h2),
        "W3": np.zeros((h2, out_dim)),
        "b3": np.zeros(out_dim),
    }
    return unpack_params(flat, like), header


def demos_to_dataset(episodes, cfg: PlanarConfig, dataset) -> int:
    """Persist expert episodes as forward trajectories; real vectors go
    under the record's extension field."""
    count = 0
    for index, (chunks, world) in enumerate(episodes):
        steps = []
        for t, (state, chunk) in enumerate(chunks):
            enc = state.encode(cfg)
            steps.append([t, digest(enc.tolist()), digest(enc.tolist()[:4]), digest(chunk.tolist())])
        trajectory = Trajectory(
            trajectory_id=f"demo-{index}",
            policy_id="planar_place_forward",
            direction=FORWARD,
            instruction=Instruction("place the object at the goal marker", "planar_place", FORWARD),
            steps=steps,
            outcome=Outcome("Success", steps_taken=len(chunks)),
            episode=index,
            extension={
                "states": [s.encode(cfg).tolist() for s, _ in chunks],
                "chunks": [c.tolist() for _, c in chunks],
            },
        )
        dataset.append(trajectory)
        count += 1
    return count
