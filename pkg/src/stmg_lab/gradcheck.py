"""Finite-difference verification of the full training pipeline.

Random small scenes drive the complete objective — graph, attention layers,
classifier, refiner, every loss term — and each parameter tensor's
reverse-mode gradient is compared against central differences. This is the
oracle side of the dual-route design: the tape is never used to produce the
reference values.
"""

from __future__ import annotations

import numpy as np

from .losses import LossWeights
from .numerics import check_gradients
from .synthdata import GeneratorConfig, generate_scene
from .trainer import ModelBundle, TrainConfig, forward_scene, init_bundle


def random_instance(rng, max_faces=4, max_frames=6):
    """A small random scene plus a freshly initialized model for it."""
    n = int(rng.integers(1, max_faces + 1))
    t = int(rng.integers(2, max_frames + 1))
    gen = GeneratorConfig(
        face_count=n,
        frame_count=t,
        width=16 * max(1, (n + 1) // 2),
        height=12,
        face_dim=5,
        visual_dim=4,
        audio_dim=3,
        turn_min=1,
        turn_max=3,
        fixations_per_frame=5,
        attention_lag=1,
        snr=2.0,
        seed=int(rng.integers(1 << 31)),
    )
    scene = generate_scene(gen)
    cfg = TrainConfig(
        embed_dim=6,
        heads=2,
        layers=2,
        weights=LossWeights(gamma1=0.5, gamma2=1.0, beta1=0.1, beta2=1.0),
        seed=int(rng.integers(1 << 31)),
    )
    bundle = init_bundle(scene, cfg, np.random.default_rng(cfg.seed))
    return scene, bundle, cfg


def full_pipeline_gradcheck(
    seed=7,
    instances=20,
    coords_per_tensor=3,
    rel_tol=1e-4,
    abs_floor=1e-7,
    h=1e-5,
    verbose=False,
):
    """Run the gradient suite; returns (ok, worst_excess, coords_checked)."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    total_checked = 0
    all_ok = True
    for i in range(instances):
        scene, bundle, cfg = random_instance(rng)
        params = bundle.parameters()

        def loss_fn():
            return forward_scene(scene, bundle, cfg)["total"]

        ok, excess, failures, checked = check_gradients(
            loss_fn,
            params,
            rel_tol=rel_tol,
            abs_floor=abs_floor,
            h=h,
            max_coords_per_tensor=coords_per_tensor,
            rng=np.random.default_rng(seed + 1000 + i),
        )
        worst = max(worst, excess)
        total_checked += checked
        all_ok = all_ok and ok
        if verbose:
            n = scene.face_count
            t = scene.frame_count
            line = f"instance {i:02d} (N={n}, T={t}): worst excess {excess:.3e}"
            if failures:
                line += f" FAILURES {[(f[0], f[1]) for f in failures[:4]]}"
            print(line)
    return all_ok, worst, total_checked
