"""Shared oracles and builders for the test suite."""

import numpy as np

from ssmtraj.data import make_windows, synth_generate
from ssmtraj.numcore import Tensor
from ssmtraj.training import ModelConfig, TrajectoryPredictor


def finite_difference(f, x, eps=1e-5):
    """Central finite-difference gradient of scalar f at array x."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def max_rel_err(a, b, floor=1e-6):
    a, b = np.asarray(a, float), np.asarray(b, float)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((np.abs(a - b) / scale).max())


def fd_param_grad(loss_fn, tensor: Tensor, index, eps=1e-5):
    """Finite-difference d(loss)/d(tensor[index]) by in-place perturbation."""
    flat = tensor.data.reshape(-1)
    orig = flat[index]
    flat[index] = orig + eps
    fp = loss_fn()
    flat[index] = orig - eps
    fm = loss_fn()
    flat[index] = orig
    return (fp - fm) / (2 * eps)


def tiny_config(**overrides) -> ModelConfig:
    base = dict(
        gat_heads=2, gat_head_dim=3, gat_att_dim=4,
        state_expansion=3, conv_width=2, block_expansion=2,
        g_graph_dim=3, g_state_dim=3, g_hidden=8,
        lift_features=3, phi_hidden=6,
        batch_size=4, epochs=2, seed=0,
    )
    base.update(overrides)
    return ModelConfig(**base)


def cv_windows(n_scenes=6, n_agents=3, seed=11, noise_std=0.0, t_obs=6, t_f=5,
               downsample=2, frames=None):
    frames = frames if frames is not None else (t_obs + t_f) * downsample
    scenes = synth_generate("highway", n_scenes, n_agents, noise_std, seed,
                            n_frames=frames)
    windows = []
    for scene in scenes:
        windows.extend(make_windows(scene, t_obs, t_f, stride=frames,
                                    radius=30.0, downsample=downsample))
    return windows


def tiny_model_and_batch(config=None, n_samples=2, seed=11):
    cfg = config or tiny_config()
    windows = cv_windows(n_scenes=max(n_samples, 2), seed=seed, t_obs=4, t_f=3)
    model = TrajectoryPredictor(cfg)
    batch = model.prepare_batch(windows[:n_samples])
    return model, batch, windows[:n_samples]
