"""expmul-attn CLI - generate instances, run kernels, sweep, compare."""

import csv
import io
import json
import logging
import sys
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Dict, List, Optional

import click
from rich.console import Console
from rich.logging import RichHandler

from expmul_attn import __version__
from expmul_attn.config import DEFAULT_QUERIES, DEFAULT_SEQ_LEN, OutFormat, RunConfig, SweepConfig
from expmul_attn.exceptions import ExpMulError, ShapeError
from expmul_attn.floatbits import Dtype
from expmul_attn.generate import generate_instance
from expmul_attn.kernels import KernelKind, KernelStats, KernelTag, Tensor, run_kernel
from expmul_attn.refmodel import DEFAULT_PWL_SEGMENTS, AccuracyReport, compare, oracle_attention
from expmul_attn.tensorfile import read_tensor, write_tensor

logger = logging.getLogger(__name__)

REPORT_FIELDS = (
    "kernel", "dtype", "d", "N", "max_abs_err", "max_rel_err", "mean_abs_err",
    "cosine_min", "flushed", "seconds",
)
CSV_HEADER = ",".join(REPORT_FIELDS)

KERNEL_CHOICES = [tag.value for tag in KernelTag]


def report_row(
    kernel: str, dtype: Dtype, d: int, n: int, report: AccuracyReport, seconds: float
) -> Dict:
    """One report record keyed by :data:`REPORT_FIELDS`."""
    return {
        "kernel": kernel,
        "dtype": dtype.value,
        "d": d,
        "N": n,
        "max_abs_err": report.max_abs_err,
        "max_rel_err": report.max_rel_err,
        "mean_abs_err": report.mean_abs_err,
        "cosine_min": report.cosine_similarity_min,
        "flushed": report.flushed_count,
        "seconds": seconds,
    }


def format_rows(rows: List[Dict], out_format: OutFormat) -> str:
    """Render report records as CSV (fixed header) or JSON."""
    if out_format is OutFormat.JSON:
        body = rows[0] if len(rows) == 1 else rows
        return json.dumps(body, indent=2) + "\n"
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_FIELDS)
    for row in rows:
        writer.writerow([row[name] for name in REPORT_FIELDS])
    return buf.getvalue()


def _check_instance(Q: Tensor, K: Tensor, V: Tensor) -> None:
    if not (Q.dtype is K.dtype is V.dtype):
        raise ShapeError("Q, K and V files have different dtypes")
    if not (Q.cols == K.cols == V.cols):
        raise ShapeError(f"hidden dimensions differ: Q {Q.cols}, K {K.cols}, V {V.cols}")
    if K.rows != V.rows:
        raise ShapeError(f"K has {K.rows} rows but V has {V.rows}")


def _timed_run(kind: KernelKind, Q, K, V, *, scale, pwl_segments, workers):
    stats = KernelStats()
    start = time.perf_counter()
    out = run_kernel(kind, Q, K, V, scale=scale, pwl_segments=pwl_segments,
                     workers=workers, stats=stats)
    return out, stats, time.perf_counter() - start


# === Operations ===

def cmd_gen(config: RunConfig, q_path, k_path, v_path) -> None:
    """Write the generated Q, K, V tensors to three tensor files."""
    for path, tensor in zip((q_path, k_path, v_path), generate_instance(config)):
        write_tensor(path, tensor)
        logger.info("wrote %s (%dx%d %s)", path, tensor.rows, tensor.cols, tensor.dtype.value)


def cmd_run(
    config: RunConfig,
    q_path,
    k_path,
    v_path,
    *,
    workers: int = 1,
    save: Optional[Path] = None,
    timing: bool = True,
    dtype: Optional[Dtype] = None,
) -> Dict:
    """Run ``config.kernel`` on tensor files and score it against the oracle.

    Shapes and dtype come from the files; ``dtype``, when given, must match them.
    """
    Q, K, V = read_tensor(q_path), read_tensor(k_path), read_tensor(v_path)
    _check_instance(Q, K, V)
    if dtype is not None and Q.dtype is not dtype:
        raise ShapeError(f"files hold {Q.dtype.value} tensors but --dtype is {dtype.value}")
    scale = config.scale_by_inv_sqrt_d
    out, stats, seconds = _timed_run(config.kernel, Q, K, V, scale=scale,
                                     pwl_segments=config.pwl_segments, workers=workers)
    report = compare(out, oracle_attention(Q, K, V, scale=scale), flushed=stats.flushed)
    if save is not None:
        write_tensor(save, out)
    row = report_row(config.kernel.label, Q.dtype, Q.cols, K.rows, report, seconds if timing else 0.0)
    row["n_q"] = Q.rows
    return row


def cmd_sweep(sweep: SweepConfig, *, workers: int = 1, timing: bool = True) -> List[Dict]:
    """One report record per (kernel, dtype, d) cell of the grid."""
    rows = []
    for cell in sweep.cells():
        Q, K, V = generate_instance(cell)
        out, stats, seconds = _timed_run(cell.kernel, Q, K, V, scale=cell.scale_by_inv_sqrt_d,
                                         pwl_segments=cell.pwl_segments, workers=workers)
        report = compare(out, oracle_attention(Q, K, V, scale=cell.scale_by_inv_sqrt_d),
                         flushed=stats.flushed)
        logger.info("sweep %s %s d=%d: max_rel_err=%.3g", cell.kernel.label, cell.dtype.value,
                    cell.d, report.max_rel_err)
        rows.append(report_row(cell.kernel.label, cell.dtype, cell.d, cell.seq_len, report,
                               seconds if timing else 0.0))
    return rows


def cmd_compare(q_path, k_path, v_path, output_path, *, scale: bool = False) -> Dict:
    """Score a saved kernel output against the oracle of its inputs."""
    Q, K, V = read_tensor(q_path), read_tensor(k_path), read_tensor(v_path)
    _check_instance(Q, K, V)
    out = read_tensor(output_path)
    report = compare(out, oracle_attention(Q, K, V, scale=scale))
    return {"output": str(output_path), "dtype": out.dtype.value, "d": Q.cols, "N": K.rows,
            "n_q": Q.rows, **report.to_dict()}


# === Command line ===

@contextmanager
def _exit_on_error():
    """Turn library and I/O errors into a diagnostic and exit status 1."""
    try:
        yield
    except (ExpMulError, OSError) as e:
        click.echo(f"Error: {e}", err=True)
        sys.exit(1)


def _configure_logging(verbose: int) -> None:
    level = logging.WARNING if verbose == 0 else logging.INFO if verbose == 1 else logging.DEBUG
    logging.basicConfig(
        level=level,
        format="%(message)s",
        handlers=[RichHandler(console=Console(stderr=True), show_path=False)],
        force=True,
    )


def instance_options(f):
    """Options shared by commands that generate instances."""
    f = click.option("--stress", is_flag=True, help="Force clipping and flush-to-zero paths")(f)
    f = click.option("--seed", default=0, type=int, show_default=True, help="Generator seed")(f)
    return f


dtype_option = click.option(
    "--dtype", type=click.Choice([dt.value for dt in Dtype]), help="Tensor storage format"
)
workers_option = click.option(
    "--workers", default=1, type=click.IntRange(min=1), envvar="EXPMUL_ATTN_WORKERS",
    show_default=True, help="Threads used across queries",
)
timing_option = click.option(
    "--timing/--no-timing", default=True, help="Report wall-clock seconds (0 when disabled)"
)
pwl_option = click.option(
    "--pwl-segments", default=DEFAULT_PWL_SEGMENTS, type=click.IntRange(min=1), show_default=True,
    help="Segments of the PWL exponential",
)
scale_option = click.option("--scale", is_flag=True, help="Scale scores by 1/sqrt(d)")
out_option = click.option(
    "--out", "out_format", type=click.Choice([f.value for f in OutFormat]), default="json",
    show_default=True, help="Report format",
)


@click.group()
@click.option("-v", "--verbose", count=True, help="Log progress (-vv for debug)")
@click.version_option(__version__, prog_name="expmul-attn")
def cli(verbose):
    """Bit-accurate ExpMul and FlashAttention-2 kernels with an oracle harness."""
    _configure_logging(verbose)


@cli.command()
@click.option("--dim", "d", default=16, type=int, show_default=True, help="Hidden dimension d")
@click.option("--seqlen", "seq_len", default=DEFAULT_SEQ_LEN, type=int, show_default=True,
              help="Key/value count N")
@click.option("--queries", "n_q", default=DEFAULT_QUERIES, type=int, show_default=True,
              help="Query count")
@dtype_option
@instance_options
@click.option("--q", "q_path", required=True, type=click.Path(dir_okay=False), help="Q output file")
@click.option("--k", "k_path", required=True, type=click.Path(dir_okay=False), help="K output file")
@click.option("--v", "v_path", required=True, type=click.Path(dir_okay=False), help="V output file")
def gen(d, seq_len, n_q, dtype, stress, seed, q_path, k_path, v_path):
    """Generate deterministic Q, K, V tensor files."""
    with _exit_on_error():
        config = RunConfig(
            dtype=Dtype.parse(dtype or "fp32"), d=d, seq_len=seq_len, n_q=n_q,
            seed=seed, stress=stress,
        )
        cmd_gen(config, q_path, k_path, v_path)
        click.echo(f"Q {n_q}x{d}, K {seq_len}x{d}, V {seq_len}x{d} ({config.dtype.value})")


@cli.command()
@click.option("--kernel", type=click.Choice(KERNEL_CHOICES), default="flash2-expmul",
              show_default=True)
@click.option("--exp", "exp_mode", type=click.Choice(["accurate", "pwl"]), default="accurate",
              show_default=True, help="Exponential of the exact kernels")
@dtype_option
@scale_option
@out_option
@pwl_option
@workers_option
@timing_option
@click.option("--q", "q_path", required=True, type=click.Path(dir_okay=False), help="Q tensor file")
@click.option("--k", "k_path", required=True, type=click.Path(dir_okay=False), help="K tensor file")
@click.option("--v", "v_path", required=True, type=click.Path(dir_okay=False), help="V tensor file")
@click.option("--save", type=click.Path(dir_okay=False, path_type=Path),
              help="Also write the kernel output tensor here")
def run(kernel, exp_mode, dtype, scale, out_format, pwl_segments, workers, timing,
        q_path, k_path, v_path, save):
    """Run a kernel on tensor files and report its error against the oracle."""
    with _exit_on_error():
        config = RunConfig(
            kernel=KernelKind.parse(kernel, exp_mode), scale_by_inv_sqrt_d=scale,
            out_format=OutFormat(out_format), pwl_segments=pwl_segments,
        )
        row = cmd_run(
            config, q_path, k_path, v_path, workers=workers, save=save, timing=timing,
            dtype=Dtype.parse(dtype) if dtype else None,
        )
        click.echo(format_rows([row], config.out_format), nl=False)


@cli.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              help="JSON sweep grid (dims, dtypes, kernels, seqLen, queries, seed, out)")
@click.option("--dim", "dims", multiple=True, type=int, help="Hidden dimension (repeatable)")
@click.option("--dtype", "dtypes", multiple=True, type=click.Choice([dt.value for dt in Dtype]),
              help="Storage format (repeatable)")
@click.option("--kernel", "kernels", multiple=True, type=click.Choice(KERNEL_CHOICES),
              help="Kernel (repeatable)")
@click.option("--exp", "exp_mode", type=click.Choice(["accurate", "pwl"]), default=None,
              help="Exponential of the exact kernels")
@click.option("--seqlen", "seq_len", type=int, default=None, help="Key/value count N")
@click.option("--queries", "n_q", type=int, default=None, help="Query count")
@click.option("--seed", type=int, default=None, help="Generator seed")
@click.option("--stress", is_flag=True, help="Force clipping and flush paths")
@scale_option
@click.option("--out", "out_format", type=click.Choice([f.value for f in OutFormat]),
              default=None, help="Report format [default: csv]")
@click.option("--pwl-segments", type=click.IntRange(min=1), default=None,
              help="Segments of the PWL exponential")
@workers_option
@timing_option
def sweep(config_path, dims, dtypes, kernels, exp_mode, seq_len, n_q, seed, stress, scale,
          out_format, pwl_segments, workers, timing):
    """Sweep kernels x dtypes x hidden dimensions and emit one row per cell."""
    with _exit_on_error():
        grid = SweepConfig.load(config_path) if config_path else SweepConfig()
        kinds = None
        if kernels or exp_mode:
            names = kernels or [k.tag.value for k in grid.kernels]
            kinds = [KernelKind.parse(name, exp_mode) for name in names]
        grid = grid.with_overrides(
            dims=list(dims) or None,
            dtypes=[Dtype.parse(dt) for dt in dtypes] or None,
            kernels=kinds,
            seq_len=seq_len,
            n_q=n_q,
            seed=seed,
            stress=stress or None,
            scale=scale or None,
            pwl_segments=pwl_segments,
            out_format=OutFormat(out_format) if out_format else None,
        )
        rows = cmd_sweep(grid, workers=workers, timing=timing)
        click.echo(format_rows(rows, grid.out_format), nl=False)


@cli.command("compare")
@click.option("--q", "q_path", required=True, type=click.Path(dir_okay=False), help="Q tensor file")
@click.option("--k", "k_path", required=True, type=click.Path(dir_okay=False), help="K tensor file")
@click.option("--v", "v_path", required=True, type=click.Path(dir_okay=False), help="V tensor file")
@click.option("--output", "output_path", required=True, type=click.Path(dir_okay=False),
              help="Kernel output tensor file (from run --save)")
@scale_option
def compare_cmd(q_path, k_path, v_path, output_path, scale):
    """Score a saved kernel output against the double-precision oracle."""
    with _exit_on_error():
        result = cmd_compare(q_path, k_path, v_path, output_path, scale=scale)
        click.echo(json.dumps(result, indent=2))


def main():
    """Entry point."""
    cli()


if __name__ == "__main__":
    main()
