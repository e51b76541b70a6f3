"""Compare the compiled and numpy kernel backends on the condition-network shapes.

    python benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Every case first checks that the backends agree, then reports the best of
``--repeat`` timings per backend and the speed-up of the compiled one.
"""

from __future__ import annotations

import json
import timeit

import click
import numpy as np

from cprgcn.tensor import _kernels_py, kernels

# (label, batch, c_in, c_out, side): desk profile layers, then the full-size ones
CASES = [
    ("desk conv1", 64, 1, 4, 8),
    ("desk conv2", 64, 4, 8, 4),
    ("desk conv3", 64, 8, 16, 2),
    ("full conv1", 16, 1, 16, 24),
    ("full conv2", 16, 16, 32, 12),
    ("full conv3", 16, 32, 64, 6),
]


def _ops(mod, x, w, b, gout):
    y, arg = mod.maxpool3d_forward(np.ascontiguousarray(x))
    return {
        "conv fwd": lambda: mod.conv3d_forward(x, w, b),
        "conv bwd": lambda: mod.conv3d_backward(x, w, gout, True),
        "pool fwd": lambda: mod.maxpool3d_forward(x),
        "pool bwd": lambda: mod.maxpool3d_backward(np.ones_like(y), arg, x.shape),
    }


def _agree(a, b) -> bool:
    if isinstance(a, tuple):
        return all(_agree(p, q) for p, q in zip(a, b))
    if a is None:
        return b is None
    return np.allclose(a, b, rtol=1e-9, atol=1e-9)


def _best(fn, repeat: int) -> float:
    fn()
    number = max(1, int(0.05 / max(timeit.timeit(fn, number=1), 1e-6)))
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


@click.command()
@click.option("--repeat", default=5, show_default=True, help="Timing repeats per case.")
@click.option("--json", "json_path", type=click.Path(dir_okay=False), help="Also write results as JSON.")
@click.option("--seed", default=0, show_default=True)
def main(repeat, json_path, seed):
    if "cython" not in kernels.available():
        raise click.ClickException("compiled kernels are not built; run `pip install -e .` first")
    compiled = kernels.use("cython")
    rng = np.random.default_rng(seed)
    rows = []
    click.echo(f"{'case':<12}{'op':<10}{'numpy ms':>10}{'cython ms':>11}{'speed-up':>10}  agree")
    for label, n, cin, cout, side in CASES:
        x = rng.standard_normal((n, cin, side, side, side))
        w = rng.standard_normal((cout, cin, 3, 3, 3)) * 0.1
        b = rng.standard_normal(cout)
        gout = rng.standard_normal((n, cout, side, side, side))
        py_ops, c_ops = _ops(_kernels_py, x, w, b, gout), _ops(compiled, x, w, b, gout)
        for op in py_ops:
            ok = _agree(py_ops[op](), c_ops[op]())
            t_py, t_c = _best(py_ops[op], repeat), _best(c_ops[op], repeat)
            rows.append({"case": label, "op": op, "numpy_s": t_py, "cython_s": t_c, "agree": bool(ok)})
            click.echo(f"{label:<12}{op:<10}{t_py * 1e3:>10.3f}{t_c * 1e3:>11.3f}{t_py / t_c:>9.2f}x  {ok}")
    kernels.use("auto")
    if json_path:
        with open(json_path, "w") as fh:
            json.dump({"repeat": repeat, "results": rows}, fh, indent=1)
    if not all(r["agree"] for r in rows):
        raise click.ClickException("backends disagree")


if __name__ == "__main__":
    main()
