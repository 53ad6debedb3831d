"""Mixed-model calibration: LRT size under a null biomarker and CV wins for an informative one."""

import argparse
import warnings

from sparsefpca.lmm import LmmSpec, build_design, fit_ml, loo_cv, lrt_biomarker
from sparsefpca.simulate import LmmTruth, generate_lmm


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--lrt-replicates", type=int, default=500)
    p.add_argument("--cv-replicates", type=int, default=50)
    p.add_argument("--subjects", type=int, default=100)
    p.add_argument("--cv-subjects", type=int, default=60)
    p.add_argument("--effect", type=float, default=-8.0, help="biomarker coefficient for the CV runs")
    args = p.parse_args()
    warnings.simplefilter("ignore", RuntimeWarning)
    spec = LmmSpec("FVC", "TIMP")

    rejected = 0
    for r in range(args.lrt_replicates):
        ds = generate_lmm(LmmTruth(beta=(100.0, -0.5, 0.0), n_subjects=args.subjects, seed=6000 + r))
        full = fit_ml(build_design(ds, spec), with_reml=False)
        null = fit_ml(build_design(ds, spec.null()), with_reml=False)
        rejected += lrt_biomarker(full, null)[1] < 0.05
    print(f"LRT rejection at 5%: {rejected}/{args.lrt_replicates} = {rejected / args.lrt_replicates:.3f}")

    wins = 0
    for r in range(args.cv_replicates):
        ds = generate_lmm(LmmTruth(beta=(100.0, -0.5, args.effect), n_subjects=args.cv_subjects, seed=6500 + r))
        wins += loo_cv(build_design(ds, spec)).mse < loo_cv(build_design(ds, spec.null())).mse
    print(f"CV MSE full < null: {wins}/{args.cv_replicates}")


if __name__ == "__main__":
    main()
