"""Synthetic ground truth for every calibrator.

A run draws piecewise-constant wheel rates and quantises them to integer
encoder ticks. The robot is then driven exactly by those quantised rates,
so a calibrator fed noiseless data can recover the generating parameters
to machine precision. Noise, gross outliers, wheel slip, landmark scans
and model distortions are layered on top, all drawn from a single
``numpy.random.Generator`` seeded once per run.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import numpy as np
from numpy.typing import NDArray

from .geometry import compose_chain, oplus, ominus, transform_points, wrap_angle
from .kinematics import (
    DiffDriveParams,
    MecanumParams,
    Odometry,
    SensorModel,
    integrate_twist,
    robot_relative_pose,
    sensor_displacement,
)
from .scanmatch import DisplacementObs, Scan

__all__ = [
    "WorldConfig",
    "SimConfig",
    "Distortion",
    "SimData",
    "ModelFreeData",
    "World",
    "make_world",
    "gen_profile",
    "synth_displacements",
    "synth_scans",
    "synth_model_free",
    "k1_model",
    "mecanum_model",
]

DEFAULT_SIGMA = (0.002, 0.002, float(np.deg2rad(0.3)))


def k1_model() -> SensorModel:
    """Differential drive at the scale of a small service robot."""
    return SensorModel(DiffDriveParams(0.035, 0.035, 0.238), (0.020, 0.046, 3.13))


def mecanum_model() -> SensorModel:
    """Mecanum platform with a forward-mounted sensor."""
    return SensorModel(MecanumParams(0.030, 0.0825, 0.1625), (0.05, 0.01, 0.02))


@dataclass
class WorldConfig:
    """Landmark field observed by the simulated range sensor."""

    n_landmarks: int = 300
    half_size: float = 6.0
    max_range: float = 6.0
    range_noise: float = 0.005
    dropout: float = 0.05


@dataclass
class SimConfig:
    """Everything that defines one synthetic log.

    Attributes
    ----------
    model : SensorModel
        Ground-truth drive parameters and sensor pose.
    n_steps : int
        Number of scan intervals.
    period : float
        Scan period ``T`` in seconds.
    profile : str
        ``"mixed"``, ``"straight"``, ``"rotation"`` or ``"translation"``.
    sigma : tuple of float
        Displacement noise standard deviations ``(x, y, theta)``.
    outlier_fraction : float
        Share of displacement observations replaced by gross errors.
    outlier_range : tuple of float
        Gross errors are drawn with magnitude in this range of ``sigma`` multiples.
    noise_scale : float
        Multiplies the drawn noise while ``sigma`` stays the reported value;
        0 gives noiseless measurements that still carry nominal weights.
    slip_fraction, slip_factor : float
        Share of intervals where one wheel slips, and the fraction of its
        commanded rotation that actually moves the robot.
    """

    model: SensorModel = field(default_factory=k1_model)
    n_steps: int = 300
    period: float = 0.7
    profile: str = "mixed"
    sigma: tuple[float, float, float] = DEFAULT_SIGMA
    outlier_fraction: float = 0.0
    outlier_range: tuple[float, float] = (10.0, 50.0)
    ticks_per_rev: float = 2578.33
    seed: int = 0
    noise_scale: float = 1.0
    slip_fraction: float = 0.0
    slip_factor: float = 0.7
    max_speed: float = 0.2
    max_turn_rate: float = 0.18
    steer_radius: float = 2.5
    world: WorldConfig = field(default_factory=WorldConfig)

    def __post_init__(self) -> None:
        if self.period <= 0:
            raise ValueError("period must be positive")
        if not 0.0 <= self.outlier_fraction < 1.0:
            raise ValueError("outlier_fraction must lie in [0, 1)")
        if self.profile not in ("mixed", "straight", "rotation", "translation"):
            raise ValueError(f"unknown profile {self.profile!r}")


@dataclass
class Distortion:
    """Departure of the true robot from its nominal kinematic model.

    ``kind`` is one of ``"none"``, ``"radius-scale"`` (per-wheel factors in
    ``scale``), ``"periodic-radius"`` (wheel ``wheel`` has radius
    ``r (1 + amplitude cos φ)``) or ``"axis-skew"`` (body twist multiplied
    by ``I + coupling``).
    """

    kind: str = "none"
    scale: tuple[float, ...] = ()
    amplitude: float = 0.0
    wheel: int = 0
    coupling: tuple[tuple[float, ...], ...] = ()
    substeps: int = 200


@dataclass
class World:
    landmarks: NDArray[np.float64]
    max_range: float


@dataclass
class SimData:
    """Output of :func:`synth_displacements`."""

    config: SimConfig
    odometry: Odometry
    obs: list[DisplacementObs]
    robot_poses: NDArray[np.float64]
    sensor_poses: NDArray[np.float64]
    s_true: NDArray[np.float64]
    outliers: NDArray[np.int64]
    slipped: NDArray[np.int64]
    rng: np.random.Generator = field(repr=False, default=None)

    @property
    def times(self) -> NDArray[np.float64]:
        return self.odometry.t


@dataclass
class ModelFreeData:
    """Tick counts, noisy displacements and the true sensor motion per interval."""

    ticks: NDArray[np.float64]
    s_hat: NDArray[np.float64]
    sigma: NDArray[np.float64]
    f_true: NDArray[np.float64]
    sim: SimData


def _sample_twist(kind: str, profile: str, pose: NDArray, cfg: SimConfig, rng: np.random.Generator) -> NDArray:
    """Draw one body twist, turning back toward the origin when far away."""
    vmin, vmax = 0.25 * cfg.max_speed, cfg.max_speed
    wmin, wmax = cfg.max_turn_rate / 6.0, cfg.max_turn_rate
    far = np.hypot(pose[0], pose[1]) > cfg.steer_radius
    home = np.arctan2(-pose[1], -pose[0])
    head_err = float(wrap_angle(home - pose[2]))
    sgn = lambda: 1.0 if rng.random() < 0.5 else -1.0  # noqa: E731
    speed = rng.uniform(vmin, vmax)
    turn = rng.uniform(wmin, wmax)
    if kind == "diff_drive":
        v = speed * sgn()
        w = turn * sgn()
        if far:
            w = turn * (1.0 if head_err >= 0 else -1.0)
            v = abs(v) * (1.0 if abs(head_err) < np.pi / 2 else -1.0)
        if profile in ("straight", "translation"):
            w = 0.0
        elif profile == "rotation":
            v = 0.0
        return np.array([v, 0.0, w])
    ang = rng.uniform(-np.pi, np.pi)
    if far:
        ang = head_err + rng.uniform(-0.5, 0.5)
    v = speed * np.array([np.cos(ang), np.sin(ang)])
    w = turn * sgn()
    if profile == "straight":
        v = speed * np.array([1.0 if not far or abs(head_err) < np.pi / 2 else -1.0, 0.0])
        w = 0.0
    elif profile == "translation":
        w = 0.0
    elif profile == "rotation":
        v = np.zeros(2)
    return np.array([v[0], v[1], w])


def gen_profile(cfg: SimConfig, rng: np.random.Generator) -> NDArray[np.int64]:
    """Integer tick counts per interval, shape ``(n_steps, m)``.

    Rates are chosen so that in ``"mixed"`` mode every interval both turns
    and translates. The robot is steered back toward the origin whenever
    it leaves a disc of radius ``steer_radius``.
    """
    drive = cfg.model.drive
    A = drive.twist_matrix()
    A_pinv = np.linalg.pinv(A)
    k = 2.0 * np.pi / cfg.ticks_per_rev
    pose = np.zeros(3)
    out = np.zeros((cfg.n_steps, drive.n_wheels), dtype=np.int64)
    for i in range(cfg.n_steps):
        tw = _sample_twist(drive.kind, cfg.profile, pose, cfg, rng)
        rates = A_pinv @ tw
        ticks = np.rint(rates * cfg.period / k).astype(np.int64)
        out[i] = ticks
        pose = oplus(pose, robot_relative_pose(drive, ticks * k / cfg.period, cfg.period))
    return out


def synth_displacements(cfg: SimConfig) -> SimData:
    """Simulate odometry and noisy consecutive sensor displacements."""
    rng = np.random.default_rng(cfg.seed)
    ticks = gen_profile(cfg, rng)
    return _finish_displacements(cfg, rng, ticks, None)


def _finish_displacements(
    cfg: SimConfig, rng: np.random.Generator, ticks: NDArray, f_override: NDArray | None
) -> SimData:
    drive, l = cfg.model.drive, np.asarray(cfg.model.extrinsic)
    n, T = cfg.n_steps, cfg.period
    k = 2.0 * np.pi / cfg.ticks_per_rev
    rates = ticks * k / T
    true_rates = rates.copy()
    n_slip = int(np.rint(cfg.slip_fraction * n))
    slipped = np.sort(rng.choice(n, size=n_slip, replace=False)) if n_slip else np.zeros(0, np.int64)
    for i in slipped:
        true_rates[i, rng.integers(drive.n_wheels)] *= cfg.slip_factor
    if f_override is None:
        q = robot_relative_pose(drive, true_rates, np.full(n, T))
        s_true = sensor_displacement(l, q)
    else:
        s_true = f_override
        q = oplus(oplus(l, s_true), ominus(l))
    robot = compose_chain(q)
    sensor = oplus(robot, l)
    sigma = np.asarray(cfg.sigma, dtype=float)
    s_hat = s_true + rng.normal(size=(n, 3)) * sigma * cfg.noise_scale
    n_out = int(np.rint(cfg.outlier_fraction * n))
    outliers = np.sort(rng.choice(n, size=n_out, replace=False)) if n_out else np.zeros(0, np.int64)
    if n_out:
        lo, hi = cfg.outlier_range
        mag = rng.uniform(lo, hi, size=(n_out, 3)) * np.where(rng.random((n_out, 3)) < 0.5, -1.0, 1.0)
        s_hat[outliers] = s_true[outliers] + mag * sigma
    s_hat[:, 2] = wrap_angle(s_hat[:, 2])
    t = np.round(np.arange(n + 1) * T, 12)
    cum = np.vstack([np.zeros((1, drive.n_wheels), np.int64), np.cumsum(ticks, axis=0)])
    odo = Odometry(t, cum, cfg.ticks_per_rev)
    obs = [DisplacementObs(float(t[i]), float(t[i + 1]), s_hat[i], sigma) for i in range(n)]
    return SimData(cfg, odo, obs, robot, sensor, s_true, outliers, slipped, rng)


def make_world(cfg: WorldConfig, rng: np.random.Generator) -> World:
    """Landmarks uniform in a square centred on the origin."""
    pts = rng.uniform(-cfg.half_size, cfg.half_size, size=(cfg.n_landmarks, 2))
    return World(pts, cfg.max_range)


def synth_scans(
    sim: SimData, world: World | None = None, rng: np.random.Generator | None = None,
    range_noise: float | None = None, dropout: float | None = None,
) -> list[Scan]:
    """Range-limited landmark scans at every sample time.

    Parameters
    ----------
    sim : SimData
        Provides the sensor trajectory and the continuing random stream.
    world : World, optional
        Landmarks; drawn from ``sim.config.world`` when omitted.
    rng : numpy.random.Generator, optional
        Defaults to the generator stored in ``sim``.
    range_noise, dropout : float, optional
        Override the world configuration.
    """
    rng = rng if rng is not None else sim.rng
    wc = sim.config.world
    world = world if world is not None else make_world(wc, rng)
    sr = wc.range_noise if range_noise is None else range_noise
    drop = wc.dropout if dropout is None else dropout
    scans = []
    for t, x in zip(sim.times, sim.sensor_poses):
        local = transform_points(ominus(x), world.landmarks)
        rng_ = np.hypot(local[:, 0], local[:, 1])
        vis = (rng_ <= world.max_range) & (rng_ > 1e-6)
        noise = rng.normal(size=len(local)) * sr
        keep = vis & (rng.random(len(local)) >= drop)
        if keep.sum() < 10:
            raise ValueError(f"only {int(keep.sum())} landmarks visible at t={t}; world does not cover trajectory")
        pts = local[keep] * (1.0 + noise[keep] / rng_[keep])[:, None]
        scans.append(Scan(float(t), pts))
    return scans


def _distorted_motion(
    drive, dist: Distortion, rates: NDArray, phi0: NDArray, T: float
) -> NDArray:
    """Robot motion over each interval by fine-step integration of the distorted model."""
    n, m = rates.shape
    N = dist.substeps
    h = T / N
    A = drive.twist_matrix()
    E = np.eye(3) + (np.asarray(dist.coupling, float) if dist.kind == "axis-skew" else 0.0)
    q = np.zeros((n, 3))
    for s in range(N):
        eff = rates.copy()
        if dist.kind == "radius-scale":
            eff = eff * np.asarray(dist.scale, float)
        elif dist.kind == "periodic-radius":
            phi = phi0[:, dist.wheel] + rates[:, dist.wheel] * (s + 0.5) * h
            eff[:, dist.wheel] *= 1.0 + dist.amplitude * np.cos(phi)
        tw = eff @ A.T
        if dist.kind == "axis-skew":
            tw = tw @ E.T
        step = integrate_twist(tw, np.full(n, h), mode="straight" if drive.motion == "straight" else "auto")
        q = oplus(q, step)
    return q


def synth_model_free(cfg: SimConfig, distortion: Distortion | None = None) -> ModelFreeData:
    """Displacement data from a (possibly distorted) robot, with the true motion kept.

    With ``kind="none"`` the result is produced by exactly the same code
    path as :func:`synth_displacements`.
    """
    dist = distortion or Distortion()
    rng = np.random.default_rng(cfg.seed)
    ticks = gen_profile(cfg, rng)
    if dist.kind == "none":
        sim = _finish_displacements(cfg, rng, ticks, None)
    else:
        if dist.kind not in ("radius-scale", "periodic-radius", "axis-skew"):
            raise ValueError(f"unknown distortion {dist.kind!r}")
        k = 2.0 * np.pi / cfg.ticks_per_rev
        rates = ticks * k / cfg.period
        phi0 = np.vstack([np.zeros((1, ticks.shape[1])), np.cumsum(ticks, axis=0)[:-1]]) * k
        q = _distorted_motion(cfg.model.drive, dist, rates, phi0, cfg.period)
        f_true = sensor_displacement(cfg.model.extrinsic, q)
        sim = _finish_displacements(cfg, rng, ticks, f_true)
    sig = np.tile(np.asarray(cfg.sigma, float), (cfg.n_steps, 1))
    s_hat = np.array([o.s_hat for o in sim.obs])
    return ModelFreeData(ticks.astype(float), s_hat, sig, sim.s_true.copy(), sim)
