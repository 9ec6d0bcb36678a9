import os
import socket
import subprocess
import sys
import time

import pytest

from wrench.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUN, EXIT_VERIFY, main
from wrench.latlog import read_log
from wrench.manifest import RunManifest
from wrench.workload import expected_total, load_rate_profile


@pytest.fixture
def profile(tmp_path):
    p = tmp_path / "p.csv"
    p.write_text("1,2000\n")
    return p


def publish(tmp_path, profile, *extra):
    log = tmp_path / "run.wrll"
    code = main(["publish", "--profile", str(profile), "--log", str(log), "--workers", "1", *extra])
    return code, log


def test_no_command_is_a_config_error(capsys):
    assert main([]) == EXIT_CONFIG


def test_publish_verify_report_convert(tmp_path, profile, capsys):
    code, log = publish(tmp_path, profile, "--seed", "3")
    assert code == EXIT_OK
    assert "sent 2000 of 2000" in capsys.readouterr().out
    assert os.path.exists(tmp_path / "run.manifest") and os.path.exists(tmp_path / "run.rates.csv")

    assert main(["verify", "--log", str(log), "--csv", str(tmp_path / "q.csv")]) == EXIT_OK
    out = capsys.readouterr().out
    assert "complete     PASS" in out and "exactly_once PASS" in out
    assert (tmp_path / "q.csv").read_text().startswith("stream_id,")

    assert main(["report", "--log", str(log), "--group-by", "payload_band"]) == EXIT_OK
    assert "p99.9_us" in capsys.readouterr().out

    assert main(["convert", "--log", str(log), "--out", str(tmp_path / "r.csv")]) == EXIT_OK
    assert len((tmp_path / "r.csv").read_text().splitlines()) == 2001
    assert main(["convert", "--from-csv", "--log", str(tmp_path / "r.csv"), "--out", str(tmp_path / "b.wrll")]) == EXIT_OK
    assert (tmp_path / "b.wrll").read_bytes() == log.read_bytes()


def test_verify_failure_exit_code(tmp_path, profile, capsys):
    code, log = publish(tmp_path, profile, "--transport", "loopback-faulty", "--drop", "0.05", "--seed", "2")
    assert code == EXIT_OK
    assert main(["verify", "--log", str(log)]) == EXIT_VERIFY
    assert "-> matches" in capsys.readouterr().out


def test_verify_without_manifest(tmp_path, profile, capsys):
    _, log = publish(tmp_path, profile)
    os.remove(tmp_path / "run.manifest")
    assert main(["verify", "--log", str(log)]) == EXIT_OK
    assert "completeness unknown" in capsys.readouterr().out


@pytest.mark.parametrize(
    "argv",
    [
        ["publish", "--log", "x.wrll"],  # no source
        ["publish", "--profile", "missing.csv"],
        ["publish", "--profile", "{p}", "--scale", "0"],
        ["publish", "--profile", "{p}", "--drop", "0.1"],  # needs loopback-faulty
        ["publish", "--profile", "{p}", "--transport", "loopback-faulty", "--drop", "2"],
        ["publish", "--profile", "{p}", "--transport", "tcp"],  # no endpoint
        ["publish", "--profile", "{p}", "--log", "/no/such/dir/x.wrll"],
        ["publish", "--profile", "{p}", "--bogus"],
        ["verify", "--log", "missing.wrll"],
        ["verify", "--log", "{p}"],  # not a latency log
        ["subscribe", "--endpoint", "localhost:notaport"],
        ["scenario", "no-such-scenario"],
    ],
)
def test_config_errors(tmp_path, profile, argv, capsys):
    argv = [a.replace("{p}", str(profile)) for a in argv]
    cwd = os.getcwd()
    os.chdir(tmp_path)
    try:
        assert main(argv) == EXIT_CONFIG
    finally:
        os.chdir(cwd)
    assert "wrench: error:" in capsys.readouterr().err


def test_dry_run_has_no_side_effects(tmp_path, profile, capsys):
    before = sorted(os.listdir(tmp_path))
    code, _ = publish(tmp_path, profile, "--dry-run")
    assert code == EXIT_OK
    assert "2000" in capsys.readouterr().out
    assert sorted(os.listdir(tmp_path)) == before
    assert main(["gen-profile", "flat", "--out", str(tmp_path / "g.csv"), "--dry-run"]) == EXIT_OK
    assert sorted(os.listdir(tmp_path)) == before


def test_config_file_and_flag_precedence(tmp_path, profile, capsys):
    cfg = tmp_path / "c.conf"
    cfg.write_text(f"profile = {profile}\nworkers = 2\nscale = 0.5\n")
    assert main(["publish", "--config", str(cfg), "--log", str(tmp_path / "a.wrll")]) == EXIT_OK
    m = RunManifest.read(tmp_path / "a.manifest")
    assert m.workers == 2 and m.intended_total == 1000
    assert main(["publish", "--config", str(cfg), "--workers", "1", "--log", str(tmp_path / "b.wrll")]) == EXIT_OK
    assert RunManifest.read(tmp_path / "b.manifest").workers == 1
    (tmp_path / "bad.conf").write_text("colour = blue\n")
    assert main(["publish", "--config", str(tmp_path / "bad.conf"), "--profile", str(profile)]) == EXIT_CONFIG


def test_duration_truncates(tmp_path, capsys):
    p = tmp_path / "long.csv"
    p.write_text("100,500\n")
    assert main(["publish", "--profile", str(p), "--duration", "1", "--log", str(tmp_path / "d.wrll"), "--workers", "1"]) == EXIT_OK
    assert len(read_log(tmp_path / "d.wrll")) == 500


def test_gen_profile_kinds(tmp_path, capsys):
    assert main(["gen-profile", "snapshot60", "--out", str(tmp_path / "s.csv")]) == EXIT_OK
    assert expected_total(load_rate_profile(tmp_path / "s.csv")) == 18_023_640
    assert main(["gen-profile", "illustrative-day"]) == EXIT_OK
    assert "ILLUSTRATIVE ONLY" in capsys.readouterr().out
    assert main(["gen-profile", "ramp", "--rate", "1000", "--seconds", "4", "--out", str(tmp_path / "r.csv")]) == EXIT_OK
    assert [s.rate for s in load_rate_profile(tmp_path / "r.csv").segments] == [250, 500, 750, 1000]


def test_scenario_listing(capsys):
    assert main(["scenario"]) == EXIT_OK
    out = capsys.readouterr().out
    for name in ("desk-smoke", "faulty-smoke", "peak-burst", "snapshot60"):
        assert name in out


def test_snapshot_replay_via_cli(tmp_path, capsys):
    from wrench.engine import write_snapshot
    from wrench.codec import encode_batch, make_headers
    import numpy as np

    hdr = make_headers(100)
    hdr["sequence"] = np.arange(100)
    write_snapshot(tmp_path / "s.wrsn", list(encode_batch(hdr, np.full(100, 64)).frames()), [0] + [1_000_000] * 99)
    assert main(["publish", "--snapshot", str(tmp_path / "s.wrsn"), "--time-scale", "2", "--log", str(tmp_path / "s.wrll")]) == EXIT_OK
    assert main(["verify", "--log", str(tmp_path / "s.wrll")]) == EXIT_OK
    assert main(["publish", "--snapshot", str(tmp_path / "s.wrsn"), "--scale", "2"]) == EXIT_CONFIG


def _port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def test_tcp_separate_processes(tmp_path, profile):
    ep = f"127.0.0.1:{_port()}"
    py = [sys.executable, "-m", "wrench"]
    sub = subprocess.Popen(py + ["subscribe", "--transport", "tcp", "--endpoint", ep, "--log", str(tmp_path / "t.wrll"),
                                 "--connections", "2", "--idle-timeout", "30"])
    try:
        time.sleep(0.5)
        pub = subprocess.run(py + ["publish", "--profile", str(profile), "--transport", "tcp", "--endpoint", ep,
                                   "--workers", "2", "--manifest", str(tmp_path / "t.manifest")], timeout=60)
        assert pub.returncode == EXIT_OK
        assert sub.wait(timeout=60) == EXIT_OK
    finally:
        if sub.poll() is None:
            sub.kill()
    assert main(["verify", "--log", str(tmp_path / "t.wrll")]) == EXIT_OK


def test_tcp_publish_without_listener_is_run_failure(tmp_path, profile):
    code = main(["publish", "--profile", str(profile), "--transport", "tcp", "--endpoint", f"127.0.0.1:{_port()}",
                 "--manifest", str(tmp_path / "m.manifest"), "--workers", "1"])
    assert code == EXIT_RUN


def test_console_script_version():
    out = subprocess.run([sys.executable, "-m", "wrench", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.startswith("wrench ")
