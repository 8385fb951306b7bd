"""Console entry point.

Thread pinning must happen before numpy is imported anywhere in the process,
so this module stays import-light: it reads --threads from argv, sets the
BLAS/OpenMP environment, and only then pulls in the numeric implementation.
"""

from __future__ import annotations

import os
import sys

_THREAD_ENV_VARS = (
    "OPENBLAS_NUM_THREADS",
    "OMP_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
)


def _peek_threads(argv) -> int:
    threads = 1
    for k, arg in enumerate(argv):
        if arg == "--threads" and k + 1 < len(argv):
            try:
                threads = int(argv[k + 1])
            except ValueError:
                pass
        elif arg.startswith("--threads="):
            try:
                threads = int(arg.split("=", 1)[1])
            except ValueError:
                pass
    return max(threads, 1)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    threads = _peek_threads(argv)
    for var in _THREAD_ENV_VARS:
        os.environ.setdefault(var, str(threads))
    from . import climain

    return climain.run(argv)


if __name__ == "__main__":
    raise SystemExit(main())
