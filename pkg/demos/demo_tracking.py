"""Track a few frames against one keyframe and compare ray and point residuals under outliers.

Usage: python demos/demo_tracking.py [--seed 0] [--outliers 0.3]
"""

import argparse

import numpy as np

from pmslam.camera import match_pointmaps
from pmslam.synth import NoiseModel, make_scene, make_trajectory, predict_pair
from pmslam.tracking import Keyframe, solve_pose


def pose_error(T, truth):
    return float(np.linalg.norm((T.inverse() @ truth).log()))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--outliers", type=float, default=0.3, help="fraction of gross depth outliers")
    args = ap.parse_args()

    scene = make_scene(args.seed)
    poses = make_trajectory("orbit", 30, args.seed)
    key = predict_pair(scene, poses[0], poses[0])
    kf = Keyframe(0, key.X_ii, key.C_i, key.F_i, poses[0])
    noise = NoiseModel(depth_sigma=0.01, outlier_frac=args.outliers, conf_from_error=False)

    print("frame  valid   ray err    point err  GN iters")
    for f in range(1, 6):
        clean = predict_pair(scene, poses[f], poses[0])
        matches = match_pointmaps(clean.X_ii, clean.X_ji, clean.F_i, clean.F_j)
        measured = predict_pair(scene, poses[f], poses[0], noise, seed=f)
        truth = poses[0].inverse() @ poses[f]
        T_ray, _, st = solve_pose(kf, measured, mode="ray", matches=matches, subpixel=False)
        T_pt, _, _ = solve_pose(kf, measured, mode="point", matches=matches, subpixel=False)
        print(f"{f:5d}  {matches.valid_fraction:.3f}  {pose_error(T_ray, truth):.2e}   "
              f"{pose_error(T_pt, truth):.2e}   {st['iterations']}")


if __name__ == "__main__":
    main()
