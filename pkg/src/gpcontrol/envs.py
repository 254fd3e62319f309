"""Simulated plants: cart-pole swing-up and double-pendulum swing-up.

Both systems use zero-order-hold control (the control signal is constant
between controller updates), classical 4th-order Runge-Kutta integration
with fixed substeps inside each control interval, and i.i.d. Gaussian
system noise added once per control interval.

Cart-pole: state [cart position x, cart velocity dx, pole angle theta,
angular velocity dtheta], theta measured from hanging straight down, a
horizontal force u on the cart, viscous friction b on the cart velocity,
point-mass pole of length l:

    ddx     = (u - b dx + m sin(theta) (l dtheta^2 + g cos(theta)))
              / (M + m sin(theta)^2)
    ddtheta = -(ddx cos(theta) + g sin(theta)) / l

Double pendulum: two uniform links with independent joint torques
(u1 at the base, u2 between the links), state [theta1, theta2, dtheta1,
dtheta2] with both angles measured from upright (absolute). With
c_i = l_i/2, I_i = m_i l_i^2/12, the mass matrix and forces follow the
standard two-link manipulator equations; in absolute coordinates the
elbow torque enters as (Q1, Q2) = (u1 - u2, u2).
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .beliefs import GaussianBelief
from .cost import CostConfig, CostSpaceMap, SaturatingStateCost
from .errors import DimensionError, NumericalError

logger = logging.getLogger(__name__)

ENV_FORMAT_TAG = "gpcontrol-env-v1"


@dataclass(frozen=True)
class EnvSpec:
    """Plant, task, and episode configuration."""

    variant: str
    physical: dict
    dt_control: float
    noise_std: np.ndarray            # per-state-dimension std of system noise
    u_max: np.ndarray
    init_mean: np.ndarray
    init_cov: np.ndarray
    sigma_c: float
    horizon_seconds: float
    angle_dims: tuple
    substeps: int = 30

    def __post_init__(self):
        if self.dt_control <= 0:
            raise ValueError("dt_control must be positive")
        for key, val in self.physical.items():
            if key != "friction" and val <= 0:
                raise ValueError(f"physical parameter {key} must be positive")
        object.__setattr__(self, "noise_std", np.asarray(self.noise_std, float))
        object.__setattr__(self, "u_max", np.asarray(self.u_max, float))
        object.__setattr__(self, "init_mean", np.asarray(self.init_mean, float))
        object.__setattr__(self, "init_cov", np.asarray(self.init_cov, float))
        object.__setattr__(self, "angle_dims", tuple(self.angle_dims))

    @property
    def state_dim(self):
        return self.init_mean.shape[0]

    @property
    def control_dim(self):
        return self.u_max.shape[0]

    @property
    def horizon_steps(self):
        return int(round(self.horizon_seconds / self.dt_control))

    def init_belief(self):
        return GaussianBelief(self.init_mean, self.init_cov)

    def to_dict(self):
        return {
            "format": ENV_FORMAT_TAG,
            "variant": self.variant,
            "physical": dict(self.physical),
            "dt_control": self.dt_control,
            "noise_std": self.noise_std.tolist(),
            "u_max": self.u_max.tolist(),
            "init_mean": self.init_mean.tolist(),
            "init_cov": self.init_cov.tolist(),
            "sigma_c": self.sigma_c,
            "horizon_seconds": self.horizon_seconds,
            "angle_dims": list(self.angle_dims),
            "substeps": self.substeps,
        }

    @classmethod
    def from_dict(cls, data):
        if data.get("format") != ENV_FORMAT_TAG:
            raise ValueError(f"unsupported env format {data.get('format')!r}")
        fields = {k: v for k, v in data.items() if k != "format"}
        fields["init_cov"] = np.asarray(fields["init_cov"], float)
        return cls(**fields)

    def content_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def cartpole_spec(noise_std=0.01, sigma_c=0.25, horizon_seconds=2.5,
                  init_std=0.1, ucb_kappa=0.0):
    """Cart-pole swing-up with the standard task constants.

    Cart and pole masses 0.5 kg, pole length 0.5 m, cart friction
    0.1 Ns/m, force limit 10 N, 100 ms control interval. Start hanging
    down at the track center; the goal is the pole upright (theta = pi)
    with the cart back at the center.
    """
    d = 4
    return EnvSpec(
        variant="cartpole",
        physical={"cart_mass": 0.5, "pole_mass": 0.5, "pole_length": 0.5,
                  "friction": 0.1, "gravity": 9.81},
        dt_control=0.1,
        noise_std=np.full(d, float(noise_std)),
        u_max=np.array([10.0]),
        init_mean=np.zeros(d),
        init_cov=np.eye(d) * init_std**2,
        sigma_c=float(sigma_c),
        horizon_seconds=float(horizon_seconds),
        angle_dims=(2,),
    )


def double_pendulum_spec(noise_std=0.01, sigma_c=0.5, horizon_seconds=2.5,
                         init_std=0.1, ucb_kappa=0.0):
    """Two-link swing-up: 1 m / 0.5 kg links, torques within 3 Nm.

    Angles measured from upright; the initial state hangs down at
    [pi, pi, 0, 0] and the target is both links upright (zeros).
    """
    d = 4
    return EnvSpec(
        variant="double_pendulum",
        physical={"m1": 0.5, "m2": 0.5, "l1": 1.0, "l2": 1.0,
                  "gravity": 9.81},
        dt_control=0.1,
        noise_std=np.full(d, float(noise_std)),
        u_max=np.array([3.0, 3.0]),
        init_mean=np.array([np.pi, np.pi, 0.0, 0.0]),
        init_cov=np.eye(d) * init_std**2,
        sigma_c=float(sigma_c),
        horizon_seconds=float(horizon_seconds),
        angle_dims=(0, 1),
        substeps=50,
    )


def make_spec(variant, **kwargs):
    if variant == "cartpole":
        return cartpole_spec(**kwargs)
    if variant == "double_pendulum":
        return double_pendulum_spec(**kwargs)
    raise ValueError(f"unknown environment variant {variant!r}")


# ---------------------------------------------------------------------------
# dynamics


def _cartpole_deriv(spec, state, u):
    mc = spec.physical["cart_mass"]
    mp = spec.physical["pole_mass"]
    length = spec.physical["pole_length"]
    fric = spec.physical["friction"]
    grav = spec.physical["gravity"]
    x, dx, th, dth = state
    sin, cos = np.sin(th), np.cos(th)
    ddx = (u[0] - fric * dx + mp * sin * (length * dth**2 + grav * cos)) / (
        mc + mp * sin**2)
    ddth = -(ddx * cos + grav * sin) / length
    return np.array([dx, ddx, dth, ddth])


def _double_pendulum_deriv(spec, state, u):
    m1, m2 = spec.physical["m1"], spec.physical["m2"]
    l1, l2 = spec.physical["l1"], spec.physical["l2"]
    grav = spec.physical["gravity"]
    c1, c2 = 0.5 * l1, 0.5 * l2
    i1, i2 = m1 * l1**2 / 12.0, m2 * l2**2 / 12.0
    t1, t2, dt1, dt2 = state
    sin_d = np.sin(t1 - t2)
    cos_d = np.cos(t1 - t2)

    m11 = m1 * c1**2 + i1 + m2 * l1**2
    m12 = m2 * l1 * c2 * cos_d
    m22 = m2 * c2**2 + i2
    q1 = u[0] - u[1]
    q2 = u[1]
    rhs1 = q1 - m2 * l1 * c2 * sin_d * dt2**2 + grav * np.sin(t1) * (
        m1 * c1 + m2 * l1)
    rhs2 = q2 + m2 * l1 * c2 * sin_d * dt1**2 + grav * m2 * c2 * np.sin(t2)
    det = m11 * m22 - m12 * m12
    ddt1 = (m22 * rhs1 - m12 * rhs2) / det
    ddt2 = (m11 * rhs2 - m12 * rhs1) / det
    return np.array([dt1, dt2, ddt1, ddt2])


_DERIVS = {"cartpole": _cartpole_deriv,
           "double_pendulum": _double_pendulum_deriv}


def mechanical_energy(spec, state):
    """Total mechanical energy; conserved with no friction and no control."""
    if spec.variant == "cartpole":
        mc = spec.physical["cart_mass"]
        mp = spec.physical["pole_mass"]
        length = spec.physical["pole_length"]
        grav = spec.physical["gravity"]
        x, dx, th, dth = state
        vx = dx + length * dth * np.cos(th)
        vy = length * dth * np.sin(th)
        kin = 0.5 * mc * dx**2 + 0.5 * mp * (vx**2 + vy**2)
        pot = -mp * grav * length * np.cos(th)
        return kin + pot
    if spec.variant == "double_pendulum":
        m1, m2 = spec.physical["m1"], spec.physical["m2"]
        l1, l2 = spec.physical["l1"], spec.physical["l2"]
        grav = spec.physical["gravity"]
        c1, c2 = 0.5 * l1, 0.5 * l2
        i1, i2 = m1 * l1**2 / 12.0, m2 * l2**2 / 12.0
        t1, t2, dt1, dt2 = state
        kin = (0.5 * (m1 * c1**2 + i1 + m2 * l1**2) * dt1**2
               + 0.5 * (m2 * c2**2 + i2) * dt2**2
               + m2 * l1 * c2 * dt1 * dt2 * np.cos(t1 - t2))
        pot = grav * ((m1 * c1 + m2 * l1) * np.cos(t1) + m2 * c2 * np.cos(t2))
        return kin + pot
    raise ValueError(spec.variant)


def simulate_step(spec, state, u, rng=None, substeps=None):
    """One zero-order-hold control interval: RK4 integration plus noise.

    Controls outside the limits are clamped with a warning. Passing
    rng=None turns system noise off (useful for diagnostics).
    """
    state = np.asarray(state, dtype=float)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if u.shape != (spec.control_dim,):
        raise DimensionError(
            f"control has shape {u.shape}, expected ({spec.control_dim},)")
    if np.any(np.abs(u) > spec.u_max + 1e-12):
        logger.warning("clamping control %s to limits %s", u, spec.u_max)
        u = np.clip(u, -spec.u_max, spec.u_max)

    deriv = _DERIVS[spec.variant]
    n_sub = spec.substeps if substeps is None else substeps
    h = spec.dt_control / n_sub
    for _ in range(n_sub):
        k1 = deriv(spec, state, u)
        k2 = deriv(spec, state + 0.5 * h * k1, u)
        k3 = deriv(spec, state + 0.5 * h * k2, u)
        k4 = deriv(spec, state + h * k3, u)
        state = state + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    if not np.all(np.isfinite(state)):
        raise NumericalError("simulated state is not finite")
    if rng is not None:
        state = state + spec.noise_std * rng.normal(size=spec.state_dim)
    return state


# ---------------------------------------------------------------------------
# policy input representation and task cost


def policy_input_indices(spec):
    """Coordinates of the policy input inside the trig-augmented state.

    The augmented state is [x, sin/cos of each angle]; the policy sees
    the non-angle coordinates plus the trig pairs (raw angles dropped),
    which keeps the controller periodic in every angle.
    """
    d = spec.state_dim
    non_angle = [i for i in range(d) if i not in spec.angle_dims]
    trig = list(range(d, d + 2 * len(spec.angle_dims)))
    return non_angle + trig


def policy_input_dim(spec):
    return spec.state_dim + len(spec.angle_dims)


def policy_input_point(spec, x):
    x = np.asarray(x, dtype=float)
    aug = list(x)
    for i in spec.angle_dims:
        aug.extend([np.sin(x[i]), np.cos(x[i])])
    aug = np.asarray(aug)
    return aug[policy_input_indices(spec)]


def task_cost(spec, ucb_kappa=0.0):
    """Saturating cost on the tip geometry of the task."""
    d = spec.state_dim
    if spec.variant == "cartpole":
        length = spec.physical["pole_length"]
        mat = np.zeros((2, d + 2))
        mat[0, 0] = 1.0          # cart position
        mat[0, d] = length       # + l sin(theta)
        mat[1, d + 1] = -length  # -l cos(theta): tip height
        cmap = CostSpaceMap(state_dim=d, angle_dims=list(spec.angle_dims),
                            matrix=mat)
        target = np.array([0.0, length])
    elif spec.variant == "double_pendulum":
        l1, l2 = spec.physical["l1"], spec.physical["l2"]
        mat = np.zeros((2, d + 4))
        mat[0, d], mat[0, d + 2] = l1, l2      # tip x
        mat[1, d + 1], mat[1, d + 3] = l1, l2  # tip y
        cmap = CostSpaceMap(state_dim=d, angle_dims=list(spec.angle_dims),
                            matrix=mat)
        target = np.array([0.0, l1 + l2])
    else:
        raise ValueError(spec.variant)
    cfg = CostConfig.selector(target, np.ones_like(target), spec.sigma_c,
                              ucb_kappa=ucb_kappa)
    return SaturatingStateCost(cmap, cfg)


def tip_distance(spec, state, cost=None):
    cost = cost if cost is not None else task_cost(spec)
    tip = cost.cost_map.map_point(np.asarray(state, float))
    return float(np.linalg.norm(tip - cost.config.target))


# ---------------------------------------------------------------------------
# episodes


@dataclass(frozen=True)
class Episode:
    """One recorded interaction: states (T+1, D), controls (T, F)."""

    states: np.ndarray
    controls: np.ndarray
    spec_hash: str
    seed: int
    dt: float

    @property
    def num_steps(self):
        return self.controls.shape[0]

    def transitions(self):
        """(inputs, targets) pairs for model fitting: x~ -> x' - x."""
        inputs = np.hstack([self.states[:-1], self.controls])
        targets = self.states[1:] - self.states[:-1]
        return inputs, targets

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"# spec_hash={self.spec_hash} seed={self.seed} "
                     f"dt={self.dt}\n")
            d = self.states.shape[1]
            f = self.controls.shape[1]
            cols = (["time"] + [f"x{i}" for i in range(d)]
                    + [f"u{i}" for i in range(f)])
            fh.write("# " + "\t".join(cols) + "\n")
            for t in range(self.states.shape[0]):
                row = [t * self.dt] + list(self.states[t])
                row += list(self.controls[t]) if t < self.num_steps else [
                    float("nan")] * f
                fh.write("\t".join(f"{v:.12g}" for v in row) + "\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().strip().lstrip("# ")
            meta = dict(item.split("=") for item in header.split())
            fh.readline()
            rows = np.loadtxt(fh)
        dt = float(meta["dt"])
        # control columns are NaN on the terminal row
        with np.errstate(invalid="ignore"):
            f = int(np.sum(np.isnan(rows[-1])))
        d = rows.shape[1] - 1 - f
        states = rows[:, 1:1 + d]
        controls = rows[:-1, 1 + d:]
        return cls(states=states, controls=controls,
                   spec_hash=meta["spec_hash"], seed=int(meta["seed"]), dt=dt)


def run_episode(spec, controller=None, seed=0, noise=True, horizon=None):
    """Roll the plant forward for one episode.

    controller: None for uniform random controls in [-u_max, u_max], or
    a callable state -> control vector. Identical seeds give identical
    episodes.
    """
    rng = np.random.default_rng(seed)
    steps = horizon if horizon is not None else spec.horizon_steps
    noise_rng = rng if noise else None
    state = spec.init_belief().sample(rng)
    states = np.empty((steps + 1, spec.state_dim))
    controls = np.empty((steps, spec.control_dim))
    states[0] = state
    for t in range(steps):
        if controller is None:
            u = rng.uniform(-spec.u_max, spec.u_max)
        else:
            u = np.atleast_1d(np.asarray(controller(state), float))
            u = np.clip(u, -spec.u_max, spec.u_max)
        state = simulate_step(spec, state, u, rng=noise_rng)
        states[t + 1] = state
        controls[t] = u
    return Episode(states=states, controls=controls,
                   spec_hash=spec.content_hash(), seed=seed,
                   dt=spec.dt_control)


def policy_controller(spec, policy):
    """Wrap a policy into a plain state -> control callable."""
    from .policy import evaluate

    def controller(state):
        return evaluate(policy, policy_input_point(spec, state))

    return controller


def success(episode, spec, window=(2.0, 2.5)):
    """Task success: tip within sigma_c of the target through the window.

    The comparison is inclusive (distance exactly sigma_c counts).
    """
    cost = task_cost(spec)
    lo, hi = window
    ok = False
    for t in range(episode.states.shape[0]):
        time = t * episode.dt
        if time < lo - 1e-9 or time > hi + 1e-9:
            continue
        ok = True
        if tip_distance(spec, episode.states[t], cost) > spec.sigma_c * (
                1.0 + 1e-9):
            return False
    return ok
