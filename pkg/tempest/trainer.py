"""
Training loops for the four reconstruction methods.

potobim: meanfield weights, tempered ELBO, AdamW.
mcd: dropout on every convolution input, NLL, AdamW with decoupled decay.
sgld: point weights, NLL, Langevin updates with lr decay gamma^t.
dip: point weights, MSE, AdamW.
"""

import csv
import logging
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from tqdm import tqdm

from tempest.errors import InvalidArgumentError, NumericalFailureError, TempestError
from tempest.forward_ops import apply_operator, from_log_domain
from tempest.helpers import substream
from tempest.metrics import psnr
from tempest.objectives import Moments, predictive_moments, tempered_loss
from tempest.schema import Likelihood, Method, RunConfig, TaskKind, TemperConfig, TraceRow, WeightMode
from tempest.tensor_engine import Tensor
from tempest.variational_net import NetOutput, NoiseInput, VariationalNet, build_net, forward, save_checkpoint

logger = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

METHOD_MODES = {
    Method.POTOBIM: WeightMode.MEANFIELD,
    Method.MCD: WeightMode.DROPOUT,
    Method.SGLD: WeightMode.POINT,
    Method.DIP: WeightMode.POINT,
}

# The NLL-only methods reuse tempered_loss with a neutral temperature and no KL.
_NO_TEMPER = TemperConfig(temperature=1.0, sigma_prior=1.0)

TRACE_FIELDS = list(TraceRow.model_fields)


@dataclass
class AdamState:
    step: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)


def step_adamw(
    params: List[np.ndarray], grads: List[np.ndarray], state: AdamState, lr: float, weight_decay: float
) -> List[np.ndarray]:
    """
    One AdamW step: p <- (1 - weight_decay) * p - lr * m_hat / (sqrt(v_hat) + eps).

    Args:
        params: Current parameter arrays
        grads: Gradients, same shapes
        state: Moment estimates; updated in place
        lr: Learning rate
        weight_decay: Decoupled decay lambda

    Returns:
        New parameter arrays
    """
    if len(params) != len(grads):
        raise InvalidArgumentError(f"{len(params)} parameters but {len(grads)} gradients")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    bias1 = 1.0 - ADAM_BETA1 ** state.step
    bias2 = 1.0 - ADAM_BETA2 ** state.step
    updated = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise InvalidArgumentError(f"parameter {i}: shape {p.shape} but gradient {g.shape}")
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g * g
        m_hat = state.m[i] / bias1
        v_hat = state.v[i] / bias2
        updated.append((1.0 - weight_decay) * p - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS))
    return updated


def step_sgld(
    params: List[np.ndarray],
    grads: List[np.ndarray],
    lr: float,
    weight_decay: float,
    rng: Union[int, np.random.Generator],
    noise_scale: float = 1.0,
) -> List[np.ndarray]:
    """
    Langevin step: w <- (1 - weight_decay) * w - lr * grad + N(0, 2 * lr) * noise_scale.

    With ``noise_scale`` 0 this is plain SGD with decoupled decay.
    """
    if not lr > 0:
        raise InvalidArgumentError(f"SGLD learning rate must be positive, got {lr}")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    std = np.sqrt(2.0 * lr) * noise_scale
    updated = []
    for p, g in zip(params, grads):
        step = (1.0 - weight_decay) * p - lr * g
        if noise_scale != 0:
            step = step + rng.normal(0.0, std, size=p.shape)
        updated.append(step)
    return updated


def image_shape(cfg: RunConfig, y: np.ndarray) -> Tuple[int, int]:
    """Spatial size of the reconstruction for an observation of the given task."""
    task = cfg.task
    if task.kind == TaskKind.SR:
        return y.shape[0] * task.scale, y.shape[1] * task.scale
    if task.kind == TaskKind.CT:
        if y.shape[0] != task.n_angles:
            raise InvalidArgumentError(f"sinogram has {y.shape[0]} projections, task expects {task.n_angles}")
        return y.shape[1], y.shape[1]
    return tuple(y.shape)


@dataclass
class RunResult:
    reconstruction: Optional[np.ndarray] = None
    uncertainty: Optional[np.ndarray] = None
    epistemic: Optional[np.ndarray] = None
    aleatoric: Optional[np.ndarray] = None
    trace: List[TraceRow] = field(default_factory=list)
    status: str = "pending"
    error: Optional[str] = None
    wall_time: float = 0.0
    net: Optional[VariationalNet] = None
    exception: Optional[BaseException] = None

    def raise_for_status(self) -> None:
        if self.exception is not None:
            raise self.exception

    def to_dict(self) -> Dict:
        return {
            "status": self.status,
            "error": self.error,
            "wall_time": self.wall_time,
            "iterations": self.trace[-1].iteration if self.trace else 0,
        }


class Reconstructor:
    def __init__(self, cfg: RunConfig):
        """
        Set up one training run.

        Args:
            cfg: Validated run configuration
        """
        self.cfg = cfg
        self.mode = METHOD_MODES[cfg.method]

    def run(
        self,
        y: np.ndarray,
        gt: Optional[np.ndarray] = None,
        mask: Optional[np.ndarray] = None,
        trace_path: Optional[Union[str, Path]] = None,
        checkpoint_path: Optional[Union[str, Path]] = None,
        progress: bool = False,
    ) -> RunResult:
        """
        Train on an observation and extract the posterior-predictive reconstruction.

        Failures are recorded on the result rather than raised; call
        :meth:`RunResult.raise_for_status` to propagate them.

        Args:
            y: Observation (a sinogram's values for CT)
            gt: Optional ground truth, used only for trace PSNR
            mask: Observation mask for inpainting
            trace_path: CSV file the trace is appended to while training
            checkpoint_path: Where to save the final network
            progress: Show a progress bar

        Returns:
            RunResult
        """
        start_time = time.time()
        result = RunResult()
        try:
            self._train(result, np.asarray(y, dtype=float), gt, mask, trace_path, progress)
            if checkpoint_path is not None:
                save_checkpoint(result.net, checkpoint_path)
            result.status = "ok"
        except TempestError as e:
            logger.error("%s run failed: %s", self.cfg.method.value, e)
            result.status = "error"
            result.error = f"{type(e).__name__}: {e}"
            result.exception = e
        except Exception as e:
            logger.error("%s run crashed: %s\n%s", self.cfg.method.value, e, traceback.format_exc())
            result.status = "error"
            result.error = f"{type(e).__name__}: {e}"
            result.exception = e
        finally:
            result.wall_time = time.time() - start_time
        return result

    def _check_inputs(self, y: np.ndarray, gt: Optional[np.ndarray], mask: Optional[np.ndarray]) -> Tuple[int, int]:
        shape = image_shape(self.cfg, y)
        if self.cfg.task.kind == TaskKind.INPAINT:
            if mask is None:
                raise InvalidArgumentError("inpainting needs a mask")
            if mask.shape != y.shape:
                raise InvalidArgumentError(f"mask shape {mask.shape} does not match observation {y.shape}")
        if gt is not None and tuple(gt.shape) != tuple(shape):
            raise InvalidArgumentError(f"ground truth {gt.shape} does not match reconstruction size {shape}")
        factor = 2 ** self.cfg.net.depth
        if shape[0] % factor or shape[1] % factor:
            raise InvalidArgumentError(f"reconstruction size {shape} is not divisible by {factor}")
        return shape

    def _forward(self, net: VariationalNet, z: NoiseInput, seed: int, mode: Optional[WeightMode] = None) -> NetOutput:
        return forward(net, z, mode=mode or self.mode, seed=seed, dropout_p=self.cfg.dropout_p)

    def _observe(self, out: NetOutput, mask: Optional[np.ndarray]) -> Tuple[Tensor, Optional[Tensor]]:
        task = self.cfg.task
        y_hat = apply_operator(task, out.x_hat, mask)
        a = None
        if self.cfg.likelihood == Likelihood.HETERO:
            a = apply_operator(task, out.neg_log_s2, mask)
        return y_hat, a

    def _to_intensity(self, image: np.ndarray) -> np.ndarray:
        if self.cfg.task.log_domain:
            return from_log_domain(image, self.cfg.task)
        return image

    def _train(self, result, y, gt, mask, trace_path, progress) -> None:
        cfg = self.cfg
        height, width = self._check_inputs(y, gt, mask)
        net = build_net(cfg.net, cfg.seed, self.mode)
        z = NoiseInput.create(cfg.net.in_channels, height, width, cfg.seed)
        rng = substream(cfg.seed, "sampling")
        params = net.params.trainable()
        adam = AdamState()
        temper = cfg.temper if cfg.method == Method.POTOBIM else _NO_TEMPER
        kl_params = net.params if cfg.method == Method.POTOBIM else None
        weight_decay = cfg.weight_decay or 0.0

        sgld_start = cfg.iterations
        if cfg.method == Method.SGLD:
            sgld_start = max(int(cfg.sgld_burn_in * cfg.iterations), cfg.iterations - cfg.eval_samples)
            sgld_start = min(sgld_start, max(cfg.iterations - 2, 0))
        sgld_samples: List[NetOutput] = []

        writer = None
        trace_file = None
        if trace_path is not None:
            Path(trace_path).parent.mkdir(parents=True, exist_ok=True)
            trace_file = open(trace_path, "w", newline="")
            writer = csv.DictWriter(trace_file, fieldnames=TRACE_FIELDS)
            writer.writeheader()

        logger.info(
            "training %s on %s: %d iterations, %d weights",
            cfg.method.value, cfg.task.kind.value, cfg.iterations, net.n_params(),
        )
        start_time = time.time()
        try:
            for t in tqdm(range(cfg.iterations), disable=not progress, desc=cfg.method.value):
                for p in params:
                    p.zero_grad()
                draw_seed = int(rng.integers(2**63))

                def draw(index: int) -> Tuple[Tensor, Optional[Tensor]]:
                    return self._observe(self._forward(net, z, draw_seed + index), mask)

                loss, report = tempered_loss(y, draw, temper, cfg.mc_samples, cfg.likelihood, kl_params)
                if not np.isfinite(loss.item()):
                    raise NumericalFailureError(
                        f"loss became {loss.item()} at iteration {t} (nll {report.nll}, kl {report.kl})"
                    )
                loss.backward()
                grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
                values = [p.data for p in params]

                if cfg.method == Method.SGLD:
                    lr = cfg.lr * cfg.lr_decay ** t
                    updated = step_sgld(values, grads, lr, weight_decay, rng, cfg.sgld_noise_scale)
                else:
                    lr = cfg.lr
                    updated = step_adamw(values, grads, adam, lr, weight_decay)
                for p, value in zip(params, updated):
                    p.data = value

                if t >= sgld_start:
                    sgld_samples.append(self._forward(net, z, 0, WeightMode.POINT))

                iteration = t + 1
                if iteration % cfg.eval_every == 0 or iteration == cfg.iterations:
                    row = TraceRow(
                        iteration=iteration,
                        loss=loss.item(),
                        nll=report.nll,
                        kl=report.kl if kl_params is not None else None,
                        psnr=self._trace_psnr(net, z, gt),
                        lr=lr,
                        wall_time=time.time() - start_time,
                    )
                    result.trace.append(row)
                    if writer is not None:
                        writer.writerow(row.model_dump())
                        trace_file.flush()
                    logger.info(
                        "iter %d loss %.6g nll %.6g%s",
                        iteration, row.loss, row.nll, "" if row.psnr is None else f" psnr {row.psnr:.2f}",
                    )
        finally:
            if trace_file is not None:
                trace_file.close()

        result.net = net
        moments = self._predict(net, z, rng, sgld_samples)
        result.reconstruction = np.clip(moments.mean, 0.0, 1.0)
        if cfg.bayesian or moments.aleatoric is not None:
            result.uncertainty = moments.variance
            result.epistemic = moments.epistemic
            result.aleatoric = moments.aleatoric

    def _trace_psnr(self, net: VariationalNet, z: NoiseInput, gt: Optional[np.ndarray]) -> Optional[float]:
        if gt is None:
            return None
        # Deterministic estimate: mean weights, no dropout.
        image = self._forward(net, z, 0, WeightMode.POINT).image()
        return psnr(gt, np.clip(self._to_intensity(image), 0.0, 1.0))

    def _predict(self, net: VariationalNet, z: NoiseInput, rng: np.random.Generator,
                 sgld_samples: List[NetOutput]) -> Moments:
        cfg = self.cfg
        if cfg.method == Method.SGLD:
            outputs = sgld_samples
        elif cfg.method == Method.DIP:
            outputs = [self._forward(net, z, 0)]
        else:
            outputs = [self._forward(net, z, int(rng.integers(2**63))) for _ in range(cfg.eval_samples)]

        images, variances = [], []
        for out in outputs:
            image, variance = out.image(), out.variance()
            if cfg.task.log_domain:
                # Delta method: dx/dv = (x + offset) * (log(1 + offset) - log(offset)).
                slope = (from_log_domain(image, cfg.task) + cfg.task.log_offset) * (
                    np.log1p(cfg.task.log_offset) - np.log(cfg.task.log_offset)
                )
                image = from_log_domain(image, cfg.task)
                variance = None if variance is None else variance * slope ** 2
            images.append(image)
            variances.append(variance)

        if len(images) == 1:
            zero = np.zeros_like(images[0])
            return Moments(
                mean=images[0],
                variance=zero if variances[0] is None else variances[0].copy(),
                epistemic=zero,
                aleatoric=variances[0],
            )
        sigma2 = variances if any(v is not None for v in variances) else None
        return predictive_moments(images, sigma2)


def run(
    cfg: RunConfig,
    y: np.ndarray,
    gt: Optional[np.ndarray] = None,
    mask: Optional[np.ndarray] = None,
    **kwargs,
) -> RunResult:
    """Train and extract; raises on failure."""
    result = Reconstructor(cfg).run(y, gt=gt, mask=mask, **kwargs)
    result.raise_for_status()
    return result
