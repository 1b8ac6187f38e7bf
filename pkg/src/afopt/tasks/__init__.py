"""Task harnesses: per-application wiring of filter, signals, and loss."""

from .. import dsp
from .base import OptIn, OptimizerSpec, StepOut, meta_input_dim, \
    optimizer_init, optimizer_step
from .gsc import GscTask, beampattern, blocking_matrix, estimate_steering, \
    principal_component
from .linear import LinearFilterTask
from .wpe import WpeTask

TASK_KINDS = ("system_id", "aec", "eq", "wpe", "gsc")

# paper-scale defaults at 16 kHz: (win_len, hop, window, channels)
_DEFAULT_FRAMES = {
    "system_id": (2048, 1024, "rect", 1),
    "aec": (2048, 1024, "rect", 1),
    "eq": (1024, 512, "rect", 1),
    "wpe": (512, 256, "hann", 4),
    "gsc": (1024, 512, "hann", 6),
}


def make_task(kind: str, win_len=None, hop=None, channels=None,
              buffered_frames=None, delay=None, constrained=None):
    """Build a task harness with per-application defaults.

    Any geometry argument left as ``None`` takes the task's default; the
    window family (rectangular overlap-save vs Hann overlap-add) is fixed by
    the task.
    """
    if kind not in TASK_KINDS:
        raise ValueError(f"unknown task {kind!r}")
    n, r, window, m = _DEFAULT_FRAMES[kind]
    n = n if win_len is None else win_len
    r = r if hop is None else (hop)
    if win_len is not None and hop is None:
        r = n // 2
    m = m if channels is None else channels
    spec = dsp.FrameSpec(n, r, window, m)
    if kind in ("system_id", "aec", "eq"):
        return LinearFilterTask(
            kind=kind, spec=spec,
            buffered_frames=1 if buffered_frames is None else buffered_frames,
            constrained=True if constrained is None else constrained)
    if kind == "wpe":
        return WpeTask(spec=spec,
                       buffered_frames=5 if buffered_frames is None
                       else buffered_frames,
                       delay=2 if delay is None else delay)
    return GscTask(spec=spec)


def task_config(task) -> dict:
    """Serializable description sufficient to rebuild the harness."""
    d = {"kind": task.kind, "win_len": task.spec.win_len,
         "hop": task.spec.hop, "channels": task.spec.channels}
    if isinstance(task, LinearFilterTask):
        d["buffered_frames"] = task.buffered_frames
        d["constrained"] = task.constrained
    elif isinstance(task, WpeTask):
        d["buffered_frames"] = task.buffered_frames
        d["delay"] = task.delay
    return d


def task_from_config(d: dict):
    return make_task(**d)
