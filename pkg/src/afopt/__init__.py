"""Block frequency-domain adaptive filtering with classical and learned optimizers.

The package is organized around a streaming adaptive-filter loop: signals are
framed into the frequency domain (``afopt.dsp``), a per-frequency filter is
applied (overlap-save or overlap-add), and an optimizer updates the filter
coefficients once per hop.  Optimizers are either classical update rules
(``afopt.classic``) or a complex-valued recurrent network (``afopt.neural``)
whose weights are trained offline by truncated backpropagation through time
(``afopt.metatrain``).  Task wiring lives in ``afopt.tasks``, synthetic data in
``afopt.scenes``, scoring in ``afopt.metrics``, and the command-line surface in
``afopt.cli``.
"""

import jax

# Double precision throughout: the DSP layer and the classical optimizers are
# specified in float64/complex128, and the meta-gradient checks rely on it.
# Must run before any jax array is created, hence here.
jax.config.update("jax_enable_x64", True)

from . import classic, dsp, metrics, neural, scenes  # noqa: E402,F401

__version__ = "0.1.0"
