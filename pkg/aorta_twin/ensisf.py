"""Ensemble simultaneous input and state filter with direct feedthrough.

The joint ensemble stacks each member's input parameters in front of its
flattened flow state. Between observations members are pushed through the
forward model with state process noise; at observation steps the joint
vectors are corrected with an ensemble Kalman gain built from perturbed
measurement predictions, and the inlet parameters are then clamped to a band
around the velocity seen at the stabilization cells.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import logfire
import numpy as np
from joblib import Parallel, delayed
from scipy import linalg, sparse

from .errors import ConstraintError, ForecastError, GainFactorizationError
from .flow_solver import FlowState
from .geometry import Mesh
from .models import NoiseSpec, PriorSpec, UpdateConfig
from .random_streams import Stream, keyed_generator, keyed_normal

logger = logging.getLogger(__name__)

# forward(params, state, t, dt) -> next state; batched evaluators take (S, n) arrays
ForwardModel = Callable[[np.ndarray, np.ndarray, float, float], np.ndarray]


@dataclass(frozen=True, eq=False)
class EnsembleLayout:
    """Slices of the joint vector: parameters first, then u, v and p of the flow state."""
    n_params: int
    n_state: int
    mesh: Mesh | None = None
    u_faces: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=int))
    v_faces: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=int))

    @classmethod
    def for_mesh(cls, mesh: Mesh, n_params: int = 1) -> "EnsembleLayout":
        u_faces = np.argwhere(mesh.u_open | mesh.u_inlet | mesh.u_outlet)
        v_faces = np.argwhere(mesh.v_open)
        n_state = len(u_faces) + len(v_faces) + mesh.n_fluid
        return cls(n_params=n_params, n_state=n_state, mesh=mesh, u_faces=u_faces, v_faces=v_faces)

    @classmethod
    def scalar(cls, n_params: int = 1, n_state: int = 1) -> "EnsembleLayout":
        """Layout with no flow-field structure, for plain vector models."""
        return cls(n_params=n_params, n_state=n_state)

    @property
    def dim(self) -> int:
        return self.n_params + self.n_state

    @property
    def params(self) -> slice:
        return slice(0, self.n_params)

    @property
    def state(self) -> slice:
        return slice(self.n_params, self.dim)

    @property
    def u(self) -> slice:
        start = self.n_params
        return slice(start, start + len(self.u_faces))

    @property
    def v(self) -> slice:
        start = self.u.stop
        return slice(start, start + len(self.v_faces))

    @property
    def p(self) -> slice:
        return slice(self.v.stop, self.dim)

    def _require_mesh(self) -> Mesh:
        if self.mesh is None:
            raise ValueError("layout has no mesh; flow-state packing is unavailable")
        return self.mesh

    def pack_state(self, state: FlowState) -> np.ndarray:
        """Flatten a FlowState into the state block (length n_state)."""
        mesh = self._require_mesh()
        return np.concatenate([
            state.u[self.u_faces[:, 0], self.u_faces[:, 1]],
            state.v[self.v_faces[:, 0], self.v_faces[:, 1]],
            mesh.from_grid(state.p),
        ])

    def unpack_state(self, vector: np.ndarray, t: float = 0.0) -> FlowState:
        """Rebuild a FlowState from a state block; faces outside the block are zero."""
        mesh = self._require_mesh()
        n_u, n_v = len(self.u_faces), len(self.v_faces)
        u = np.zeros(mesh.u_shape)
        v = np.zeros(mesh.v_shape)
        u[self.u_faces[:, 0], self.u_faces[:, 1]] = vector[:n_u]
        v[self.v_faces[:, 0], self.v_faces[:, 1]] = vector[n_u:n_u + n_v]
        p = mesh.to_grid(vector[n_u + n_v:])
        return FlowState(u, v, p, t)

    def pack(self, params: np.ndarray, state: FlowState) -> np.ndarray:
        return np.concatenate([np.atleast_1d(np.asarray(params, dtype=float)), self.pack_state(state)])

    def u_position(self) -> np.ndarray:
        """(nx+1, ny) array of joint-vector positions of u faces, -1 where absent."""
        mesh = self._require_mesh()
        index = np.full(mesh.u_shape, -1, dtype=int)
        index[self.u_faces[:, 0], self.u_faces[:, 1]] = self.u.start + np.arange(len(self.u_faces))
        return index

    def v_position(self) -> np.ndarray:
        mesh = self._require_mesh()
        index = np.full(mesh.v_shape, -1, dtype=int)
        index[self.v_faces[:, 0], self.v_faces[:, 1]] = self.v.start + np.arange(len(self.v_faces))
        return index


@dataclass(frozen=True)
class JointEnsemble:
    """S_n joint vectors [params; state] stored row-wise."""
    members: np.ndarray
    layout: EnsembleLayout
    t: float = 0.0

    def __post_init__(self) -> None:
        if self.members.ndim != 2 or self.members.shape[1] != self.layout.dim:
            raise ValueError(f"members shape {self.members.shape} does not match layout dim {self.layout.dim}")

    @property
    def n_members(self) -> int:
        return self.members.shape[0]

    @property
    def params(self) -> np.ndarray:
        return self.members[:, self.layout.params]

    @property
    def states(self) -> np.ndarray:
        return self.members[:, self.layout.state]

    def replace_members(self, members: np.ndarray, t: float | None = None) -> "JointEnsemble":
        return JointEnsemble(members, self.layout, self.t if t is None else t)


@dataclass(frozen=True, eq=False)
class ObservationOperator:
    """Linear measurement map y = H psi over the joint vector."""
    matrix: sparse.csr_matrix
    sensor_cells: tuple[int, ...] = ()

    @classmethod
    def from_sensors(
        cls,
        layout: EnsembleLayout,
        sensor_cells: Sequence[int],
        feedthrough: np.ndarray | None = None,
    ) -> "ObservationOperator":
        """Cell-centre u and v at each sensor (rows u0, v0, u1, v1, ...).

        Args:
            layout: Joint-vector layout built for the sensors' mesh
            sensor_cells: Fluid-cell indices
            feedthrough: Optional (2 * n_sensors, n_params) weights on the parameter block
        """
        mesh = layout._require_mesh()
        u_pos, v_pos = layout.u_position(), layout.v_position()
        rows: list[int] = []
        cols: list[int] = []
        for k, cell in enumerate(sensor_cells):
            i, j = mesh.fluid_ij[cell]
            for col in (u_pos[i, j], u_pos[i + 1, j]):
                if col >= 0:
                    rows.append(2 * k)
                    cols.append(col)
            for col in (v_pos[i, j], v_pos[i, j + 1]):
                if col >= 0:
                    rows.append(2 * k + 1)
                    cols.append(col)
        m = 2 * len(sensor_cells)
        matrix = sparse.coo_matrix((np.full(len(rows), 0.5), (rows, cols)), shape=(m, layout.dim)).tocsr()
        if feedthrough is not None:
            block = np.zeros((m, layout.dim))
            block[:, layout.params] = feedthrough
            matrix = (matrix + sparse.csr_matrix(block)).tocsr()
        return cls(matrix=matrix, sensor_cells=tuple(int(c) for c in sensor_cells))

    @classmethod
    def from_matrix(cls, matrix) -> "ObservationOperator":
        return cls(matrix=sparse.csr_matrix(np.atleast_2d(matrix)))

    @property
    def m(self) -> int:
        return self.matrix.shape[0]

    def apply(self, members: np.ndarray) -> np.ndarray:
        """(S_n, dim) -> (S_n, m)."""
        return np.asarray((self.matrix @ members.T).T)


def _members(ensemble: JointEnsemble | np.ndarray) -> np.ndarray:
    if isinstance(ensemble, JointEnsemble):
        return ensemble.members
    array = np.asarray(ensemble, dtype=float)
    return array.reshape(-1, 1) if array.ndim == 1 else array


def init_ensemble(prior: PriorSpec, n_members: int, layout: EnsembleLayout, seed: int) -> JointEnsemble:
    """Draw S_n members from the independent Gaussian priors of parameters and state."""
    if n_members < 2:
        raise ValueError(f"ensemble needs at least 2 members, got {n_members}")
    z = keyed_generator(seed, Stream.PRIOR).standard_normal((n_members, layout.dim))
    mean = np.empty(layout.dim)
    sd = np.empty(layout.dim)
    mean[layout.params], sd[layout.params] = prior.param_mean, np.sqrt(prior.param_variance)
    mean[layout.state], sd[layout.state] = prior.state_mean, np.sqrt(prior.state_variance)
    logger.info(
        f"Initialized {n_members} members: param ~ N({prior.param_mean}, {prior.param_variance}), "
        f"state ~ N({prior.state_mean}, {prior.state_variance}) over {layout.n_state} entries"
    )
    return JointEnsemble(mean + sd * z, layout)


def forecast(
    ensemble: JointEnsemble,
    forward: ForwardModel,
    dt: float,
    noise: NoiseSpec,
    seed: int,
    step: int = 1,
    n_jobs: int = 1,
    batched: bool = False,
) -> JointEnsemble:
    """Push every member through the forward model and add state process noise.

    The parameter block is carried over unchanged.

    Args:
        ensemble: Current joint ensemble at time t
        forward: forward(params, state, t, dt) -> next state
        dt: Filter step
        noise: Process-noise variance Q
        seed: Ensemble seed; draws are keyed by (seed, step, member, entry)
        step: Index of the step being produced
        n_jobs: Worker threads for member-parallel evaluation
        batched: forward evaluates all members at once on (S_n, n) arrays

    Returns:
        Ensemble at t + dt
    """
    layout = ensemble.layout
    params, states = ensemble.params, ensemble.states
    t = ensemble.t

    def run_member(i: int) -> np.ndarray:
        try:
            return np.asarray(forward(params[i], states[i], t, dt), dtype=float)
        except ForecastError:
            raise
        except Exception as e:
            raise ForecastError(i, str(e)) from e

    with logfire.span("forecast", step=step, members=ensemble.n_members, batched=batched):
        if batched:
            advanced = np.asarray(forward(params, states, t, dt), dtype=float)
        elif n_jobs == 1:
            advanced = np.stack([run_member(i) for i in range(ensemble.n_members)])
        else:
            advanced = np.stack(
                Parallel(n_jobs=n_jobs, prefer="threads")(delayed(run_member)(i) for i in range(ensemble.n_members))
            )

    advanced = advanced + keyed_normal(seed, Stream.PROCESS, advanced.shape, noise.process_variance, step=step)
    members = np.concatenate([params, advanced], axis=1)
    return ensemble.replace_members(members, t=t + dt)


def ensemble_mean(ensemble: JointEnsemble | np.ndarray) -> np.ndarray:
    """Per-entry arithmetic mean over members."""
    members = _members(ensemble)
    if members.shape[0] < 1:
        raise ValueError("ensemble has no members")
    return members.mean(axis=0)


def predict_measurements(
    ensemble: JointEnsemble | np.ndarray,
    H: ObservationOperator,
    noise: NoiseSpec,
    seed: int,
    beta: int = 0,
    step: int = 0,
) -> np.ndarray:
    """Perturbed predictions y_i = H psi_i + v_i with fresh draws per (step, beta)."""
    members = _members(ensemble)
    predicted = H.apply(members)
    return predicted + keyed_normal(
        seed, Stream.MEASUREMENT, predicted.shape, noise.measurement_variance, step=step, beta=beta
    )


def covariances(joint: JointEnsemble | np.ndarray, meas: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(P^y, P^psi_y) with 1/S_n normalization, evaluated in centred form."""
    members = _members(joint)
    meas = np.asarray(meas, dtype=float)
    meas = meas.reshape(-1, 1) if meas.ndim == 1 else meas
    if members.shape[0] != meas.shape[0]:
        raise ValueError(f"{members.shape[0]} joint members vs {meas.shape[0]} measurement members")
    n = members.shape[0]
    dy = meas - meas.mean(axis=0)
    dpsi = members - members.mean(axis=0)
    p_y = dy.T @ dy / n
    p_y = 0.5 * (p_y + p_y.T)
    p_psiy = dpsi.T @ dy / n
    return p_y, p_psiy


def kalman_gain(p_psiy: np.ndarray, p_y: np.ndarray, jitter: float = 0.0) -> np.ndarray:
    """K = P^psi_y (P^y + jitter I)^-1 through a Cholesky factorization."""
    p_y = np.atleast_2d(np.asarray(p_y, dtype=float))
    p_psiy = np.atleast_2d(np.asarray(p_psiy, dtype=float))
    if p_y.shape[0] != p_y.shape[1]:
        raise GainFactorizationError(f"P^y must be square, got {p_y.shape}")
    scale = max(float(np.max(np.abs(p_y), initial=0.0)), 1.0)
    if np.max(np.abs(p_y - p_y.T), initial=0.0) > 1e-12 * scale:
        raise GainFactorizationError("P^y is not symmetric")
    regularized = p_y + jitter * np.eye(p_y.shape[0])
    try:
        factor = linalg.cho_factor(regularized, lower=True)
    except linalg.LinAlgError as e:
        raise GainFactorizationError(f"regularized P^y is not positive definite (jitter={jitter:g})") from e
    return linalg.cho_solve(factor, p_psiy.T).T


def update(
    joint: JointEnsemble | np.ndarray, gain: np.ndarray, y_obs: np.ndarray, meas: np.ndarray
) -> JointEnsemble | np.ndarray:
    """psi_i <- psi_i + K (y_obs - y_i) for every member."""
    members = _members(joint)
    meas = np.asarray(meas, dtype=float)
    meas = meas.reshape(-1, 1) if meas.ndim == 1 else meas
    innovation = np.atleast_1d(np.asarray(y_obs, dtype=float)) - meas
    posterior = members + innovation @ np.atleast_2d(gain).T
    if isinstance(joint, JointEnsemble):
        return joint.replace_members(posterior)
    return posterior


@logfire.instrument("measurement_update", extract_args=False)
def measurement_update(
    joint: JointEnsemble,
    H: ObservationOperator,
    y_obs: np.ndarray,
    noise: NoiseSpec,
    config: UpdateConfig,
    seed: int,
    step: int,
) -> tuple[JointEnsemble, np.ndarray]:
    """Run the beta iterations of predict -> covariances -> gain -> update.

    Returns:
        (posterior ensemble, gain of the last iteration)
    """
    gain = np.zeros((joint.layout.dim, H.m))
    for beta in range(config.beta_iterations):
        meas = predict_measurements(joint, H, noise, seed, beta=beta, step=step)
        p_y, p_psiy = covariances(joint, meas)
        gain = kalman_gain(p_psiy, p_y, config.jitter)
        joint = update(joint, gain, y_obs, meas)
    logger.debug(f"Step {step}: {config.beta_iterations} update iteration(s), param mean {joint.params.mean(axis=0)}")
    return joint, gain


def stabilization_mean(stabilization_values: np.ndarray) -> float:
    """Mean velocity magnitude over the stabilization cells.

    Accepts magnitudes (M,) or velocity pairs (M, 2).
    """
    values = np.asarray(stabilization_values, dtype=float)
    if values.size == 0:
        raise ConstraintError("no stabilization values")
    if values.ndim == 2:
        values = np.hypot(values[:, 0], values[:, 1])
    return float(np.mean(np.abs(values)))


def constrain_parameters(
    joint: JointEnsemble,
    stabilization_values: np.ndarray,
    band: tuple[float, float] = (0.8, 1.2),
    scale: float = 1.0,
) -> JointEnsemble:
    """Clamp every member's parameters to [lower, upper] x scale x stabilization mean."""
    v_bar = stabilization_mean(stabilization_values)
    lower, upper = band[0] * v_bar * scale, band[1] * v_bar * scale
    members = joint.members.copy()
    params = members[:, joint.layout.params]
    clamped = np.clip(params, lower, upper)
    n_clamped = int(np.count_nonzero(clamped != params))
    members[:, joint.layout.params] = clamped
    if n_clamped:
        logger.info(f"Constraint clamped {n_clamped} parameter value(s) to [{lower:.6g}, {upper:.6g}]")
    return joint.replace_members(members)


def confidence_bounds(values: np.ndarray, z: float = 1.96) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(mean, lo, hi) per column with a 1/S_n standard deviation."""
    values = _members(values)
    mean = values.mean(axis=0)
    sd = values.std(axis=0)
    return mean, mean - z * sd, mean + z * sd
