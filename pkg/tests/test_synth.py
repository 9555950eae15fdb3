"""Synthetic generator tests, with an independent eigendecomposition oracle."""

import numpy as np
import pytest

from wormgnn.data import StateLabel
from wormgnn.synth import SynthConfig, generate_worm, mixing_matrix, phase_to_arc


def spectrum_oracle(matrix):
    """Explained-variance fractions via SVD of the centered data (rows = variables)."""
    centered = matrix - matrix.mean(axis=1, keepdims=True)
    singulars = np.linalg.svd(centered, compute_uv=False)
    var = singulars**2
    return var / var.sum()


def test_phase_arc_definition():
    assert phase_to_arc(np.pi / 2, 4) == 1
    assert phase_to_arc(0.0, 4) == 0
    assert phase_to_arc(np.pi, 2) == 1
    assert phase_to_arc(2 * np.pi - 1e-9, 4) == 3


def test_labels_shared_traces_differ():
    base = dict(n_neurons=8, n_timesteps=256, n_states=2, latent_seed=11, noise_std=0.02)
    a = generate_worm(SynthConfig(mixing_seed=1, **base))
    b = generate_worm(SynthConfig(mixing_seed=2, **base))
    assert a.labels == b.labels
    assert not np.allclose(a.traces, b.traces)


def test_labels_invariant_to_noise():
    base = dict(n_neurons=8, n_timesteps=256, n_states=4, latent_seed=3, mixing_seed=5)
    quiet = generate_worm(SynthConfig(noise_std=0.0, **base))
    noisy = generate_worm(SynthConfig(noise_std=0.5, **base))
    assert quiet.labels == noisy.labels


def test_mixing_matrix_orthonormal():
    for seed in range(5):
        cfg = SynthConfig(n_neurons=10, n_timesteps=16, n_states=2, mixing_seed=seed)
        q = mixing_matrix(cfg)
        assert np.allclose(q.T @ q, np.eye(cfg.latent_dim), atol=1e-9)


def test_noiseless_derivatives_low_rank():
    cfg = SynthConfig(
        n_neurons=12, n_timesteps=512, n_states=4, latent_dim=3,
        noise_std=0.0, mixing_seed=4, latent_seed=9, angular_velocity_jitter=0.05,
    )
    rec = generate_worm(cfg)
    fractions = spectrum_oracle(rec.derivatives)
    assert fractions[:3].sum() >= 0.99


def test_recording_invariants():
    cfg = SynthConfig(n_neurons=6, n_timesteps=200, n_states=2, noise_std=0.1, mixing_seed=7)
    rec = generate_worm(cfg)
    assert rec.traces.shape == rec.derivatives.shape == (6, 200)
    assert len(rec.labels) == 200
    for row in np.vstack([rec.traces, rec.derivatives]):
        assert row.min() == pytest.approx(0.0)
        assert row.max() == pytest.approx(1.0)


def test_binary_labels_use_two_states():
    cfg = SynthConfig(n_neurons=5, n_timesteps=300, n_states=2, mixing_seed=0)
    rec = generate_worm(cfg)
    assert set(rec.labels) == {StateLabel.FORWARD, StateLabel.SUSTAINED_REVERSE}


def test_four_state_labels():
    cfg = SynthConfig(n_neurons=5, n_timesteps=300, n_states=4, mixing_seed=0)
    rec = generate_worm(cfg)
    assert set(rec.labels) == {
        StateLabel.FORWARD,
        StateLabel.SUSTAINED_REVERSE,
        StateLabel.DORSAL_TURN,
        StateLabel.VENTRAL_TURN,
    }


def test_too_few_neurons_rejected():
    with pytest.raises(ValueError, match="column rank"):
        SynthConfig(n_neurons=2, n_timesteps=100, n_states=2, latent_dim=3)


def test_invalid_state_count_rejected():
    with pytest.raises(ValueError, match="n_states"):
        SynthConfig(n_neurons=5, n_timesteps=100, n_states=3)


def test_generation_deterministic():
    cfg = SynthConfig(n_neurons=6, n_timesteps=128, n_states=2, noise_std=0.05, mixing_seed=3, latent_seed=8)
    a = generate_worm(cfg)
    b = generate_worm(cfg)
    assert np.array_equal(a.traces, b.traces)
    assert a.labels == b.labels
