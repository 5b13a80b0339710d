"""Shared test utilities."""
import shlex
import sys

import numpy as np

from gadclean.image import RasterF, write_pfm


def toy_command(mode, *extra):
    """Command template running one of the bundled toy predictors."""
    return " ".join([shlex.quote(sys.executable), "-m gadclean.toy_predictors", mode,
                     "{labels_dir} {out_dir} --train-dir {train_dir}", *extra])


def script_command(tmp_path, body):
    """Command template running a throwaway Python script with the three directories."""
    script = tmp_path / "predictor.py"
    script.write_text(body)
    return f"{shlex.quote(sys.executable)} {shlex.quote(str(script))} {{train_dir}} {{labels_dir}} {{out_dir}}"


def write_constant_pfm(path, shape, value):
    write_pfm(RasterF(np.full(shape, float(value))), path)
