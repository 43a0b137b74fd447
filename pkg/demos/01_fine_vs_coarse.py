"""Compare the fine backward Euler solve with the coarse split scheme.

A 60x60 cell grid with one high-contrast channel (kappa jumps by 1e4) is
compressed onto a 6x6 coarse block grid. The coarse space splits into a
small stiff part (channel continua, treated implicitly) and an explicit
part (block averages), and the parareal loop converges on the coarse
coefficients. The error columns measure the distance to a backward Euler
solve on the full fine space at the same substep size.

Run: python3 demos/01_fine_vs_coarse.py
"""

from dataclasses import replace

from paradiff.experiment import ExperimentConfig, build_pipeline, run_single


def demo_config() -> ExperimentConfig:
    return ExperimentConfig(
        nx=60, blocks=6, layers=3, contrast=1e4,
        channels=[(2, 58, 29, 31)],
        source_kind="box", source_amplitude=1.0,
        source_region=(0.3, 0.7, 0.3, 0.7),
        alpha=0.5,
    )


def main():
    cfg = demo_config()
    pipe = build_pipeline(cfg)
    space = pipe.space

    n_fine = pipe.grid.n_interior
    n_coarse = space.d1 + space.d2
    print("fine space:   %6d interior nodes" % n_fine)
    print("coarse space: %6d functions (d1 = %d stiff, d2 = %d explicit)"
          % (n_coarse, space.d1, space.d2))
    print("compression:  %.0fx, gamma = %.4f" % (n_fine / n_coarse, pipe.gamma))
    print()

    print("%4s %6s %8s %12s %16s" % ("N", "M", "iters", "rel error", "substep/bound"))
    for n in (4, 8, 16):
        r = run_single(pipe, n)
        print("%4d %6d %8d %12.3e %16.3f"
              % (n, n, r.run.iterations, r.relative_error, r.dt_sub / r.stability_bound))
    print()
    print("The error plateaus near the projection error of the coarse space,")
    print("so refining the time grid past N = 8 buys little here. The last")
    print("column shows the explicit substep sitting safely below its")
    print("stability bound.")
    print()

    coarse2 = build_pipeline(replace(cfg, layers=2))
    r2 = run_single(coarse2, 16)
    print("with oversampling layers = 2 instead of 3 the localized basis is")
    print("truncated too aggressively: rel error %.3e vs %.3e at N = 16."
          % (r2.relative_error, run_single(pipe, 16).relative_error))


if __name__ == "__main__":
    main()
