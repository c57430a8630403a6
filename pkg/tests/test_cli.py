# Copyright Lightning AI. Licensed under the Apache License 2.0, see LICENSE file.

from contextlib import redirect_stdout
from io import StringIO
from unittest import mock

import pytest


def test_cli():
    from safeswarm.__main__ import main

    out = StringIO()
    with pytest.raises(SystemExit), redirect_stdout(out), mock.patch("sys.argv", ["safeswarm", "-h"]):
        main()
    out = out.getvalue()
    assert "usage: safeswarm" in out
    assert "{run,escape_time,sweep}" in out
    assert "Simulate a mission and write its trace." in out

    out = StringIO()
    with pytest.raises(SystemExit), redirect_stdout(out), mock.patch("sys.argv", ["safeswarm", "run", "-h"]):
        main()
    out = out.getvalue()
    assert "--preset PRESET" in out
    assert "--verbose_rollouts" in out

    out = StringIO()
    with pytest.raises(SystemExit), redirect_stdout(out), mock.patch("sys.argv", ["safeswarm", "sweep", "-h"]):
        main()
    out = out.getvalue()
    assert "--r_effect" in out


def test_cli_dispatch(tmp_path):
    import safeswarm.simulate as simulate
    from safeswarm.__main__ import main

    argv = ["safeswarm", "run", "--preset", "attack", "--seed", "3", "--out_dir", str(tmp_path)]
    with mock.patch.object(simulate, "main") as run_main, mock.patch("sys.argv", argv):
        main()
    config, out_dir = run_main.call_args.args[:2]
    assert config.attacker.enabled
    assert config.seed == 3
    assert out_dir == tmp_path
