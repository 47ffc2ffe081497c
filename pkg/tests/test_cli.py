import hashlib
import textwrap

import pytest

from rbmlab import cli


def write_config(tmp_path, body, name="config.toml"):
    path = tmp_path / name
    path.write_text(textwrap.dedent(body))
    return str(path)


BASE = """\
    [domain]
    kind = "box"
    lo = [0.0]
    hi = [1.0]

    [params]
    step_h = 1e-3
    n_paths = 400
    master_seed = 7
"""


def read_manifest(out_dir):
    entries = {}
    for line in (out_dir / "manifest.txt").read_text().splitlines():
        k, _, v = line.partition(" = ")
        entries[k] = v
    return entries


# ---------------------------------------------------------------------------
# config rejection (exit code 2)


def test_unknown_key_reports_dotted_path(tmp_path, capsys):
    cfg = write_config(
        tmp_path,
        BASE
        + """
    [simulate]
    start = [0.5]
    wrong_key = 1
    """,
    )
    assert cli.run(["simulate", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err
    assert "simulate.wrong_key" in err


def test_malformed_toml(tmp_path, capsys):
    cfg = tmp_path / "bad.toml"
    cfg.write_text("not = [toml\n")
    assert cli.run(["estimate", "--config", str(cfg)]) == 2
    assert "config error" in capsys.readouterr().err


def test_missing_config_file(tmp_path, capsys):
    missing = str(tmp_path / "nope.toml")
    assert cli.run(["estimate", "--config", missing]) == 2


def test_bad_workers(tmp_path, capsys):
    cfg = write_config(tmp_path, BASE)
    assert cli.run(["estimate", "--config", cfg, "--workers", "0"]) == 2


def test_unknown_function_name(tmp_path, capsys):
    cfg = write_config(
        tmp_path,
        BASE
        + """
    [[estimate.semigroup]]
    f = "tan1_x0"
    x = [0.5]
    t = 0.01
    """,
    )
    assert cli.run(["estimate", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert "tan1_x0" in capsys.readouterr().err


def test_missing_config_flag_and_bad_subcommand(tmp_path, capsys):
    assert cli.run(["estimate"]) == 2
    cfg = write_config(tmp_path, BASE)
    assert cli.run(["frobnicate", "--config", cfg]) == 2
    capsys.readouterr()  # swallow argparse noise


def test_unknown_verify_check(tmp_path, capsys):
    cfg = write_config(
        tmp_path,
        BASE
        + """
    [verify]
    checks = ["contraction", "perpetual_motion"]
    """,
    )
    assert cli.run(["verify", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert "perpetual_motion" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# estimate outputs


ESTIMATE = (
    BASE
    + """
    [[estimate.semigroup]]
    f = "one"
    x = [0.5]
    t = 0.05

    [[estimate.semigroup]]
    f = "cos1_x0"
    x = [0.3]
    t = 0.02

    [[estimate.kernel]]
    x = [0.5]
    t = 0.02
    cells = 8

    [[estimate.gradient]]
    f = "cos1_x0"
    x = [0.4]
    t = 0.02
    """
)


def test_conservation_row_is_exact(tmp_path):
    cfg = write_config(tmp_path, ESTIMATE)
    out = tmp_path / "out"
    assert cli.run(["estimate", "--config", cfg, "--out", str(out)]) == 0
    rows = (out / "estimates.csv").read_text().splitlines()
    one = [r for r in rows if r.startswith("semigroup:one,")]
    assert len(one) == 1
    fields = one[0].split(",")
    assert fields[4] == "1.0" and fields[5] == "0.0"


def test_outputs_bit_identical_across_workers(tmp_path):
    cfg = write_config(tmp_path, ESTIMATE)
    out1, out3 = tmp_path / "w1", tmp_path / "w3"
    assert cli.run(["estimate", "--config", cfg, "--out", str(out1), "--workers", "1"]) == 0
    assert cli.run(["estimate", "--config", cfg, "--out", str(out3), "--workers", "3"]) == 0
    for fname in ("estimates.csv", "kernel.csv"):
        assert (out1 / fname).read_bytes() == (out3 / fname).read_bytes()
    m1, m3 = read_manifest(out1), read_manifest(out3)
    assert m1["sha256_estimates.csv"] == m3["sha256_estimates.csv"]
    assert m1["workers"] == "1" and m3["workers"] == "3"


def test_manifest_hashes_match_files(tmp_path):
    cfg = write_config(tmp_path, ESTIMATE)
    out = tmp_path / "out"
    assert cli.run(["estimate", "--config", cfg, "--out", str(out)]) == 0
    manifest = read_manifest(out)
    hashed = [k for k in manifest if k.startswith("sha256_")]
    assert sorted(hashed) == ["sha256_estimates.csv", "sha256_kernel.csv"]
    for key in hashed:
        digest = hashlib.sha256((out / key[len("sha256_") :]).read_bytes()).hexdigest()
        assert manifest[key] == digest
    assert manifest["exit_code"] == "0"
    assert manifest["subcommand"] == "estimate"
    assert manifest["master_seed"] == "7"
    assert manifest["n_paths"] == "400"


def test_seed_flag_overrides_config(tmp_path):
    cfg = write_config(tmp_path, ESTIMATE)
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    assert cli.run(["estimate", "--config", cfg, "--out", str(out_a), "--seed", "99"]) == 0
    assert cli.run(["estimate", "--config", cfg, "--out", str(out_b)]) == 0
    assert read_manifest(out_a)["master_seed"] == "99"
    rows_a = (out_a / "estimates.csv").read_text()
    rows_b = (out_b / "estimates.csv").read_text()
    assert rows_a != rows_b  # different stream
    # conservation stays exact regardless of seed
    assert ",1.0,0.0," in rows_a


# ---------------------------------------------------------------------------
# simulate


def test_simulate_row_count_and_grid(tmp_path):
    cfg = write_config(
        tmp_path,
        """
    [domain]
    kind = "box"
    lo = [0.0]
    hi = [1.0]

    [params]
    step_h = 1e-3
    horizon_T = 0.02
    n_paths = 400

    [simulate]
    start = [0.5]
    n_paths = 3
    """,
    )
    out = tmp_path / "out"
    assert cli.run(["simulate", "--config", cfg, "--out", str(out)]) == 0
    rows = (out / "trajectories.csv").read_text().splitlines()
    assert rows[0] == "path_index,time,x0,local_time"
    assert len(rows) == 1 + 3 * 21  # header + (n_steps+1) rows per path
    first = rows[1].split(",")
    assert first[0] == "0" and float(first[1]) == 0.0 and float(first[2]) == 0.5
    # local time accumulates monotonically within each path
    for pi in range(3):
        block = rows[1 + 21 * pi : 1 + 21 * (pi + 1)]
        lt = [float(r.split(",")[3]) for r in block]
        assert lt == sorted(lt)
        assert lt[0] == 0.0


# ---------------------------------------------------------------------------
# verify and green subcommands


def test_verify_subcommand_writes_summary(tmp_path):
    cfg = write_config(
        tmp_path,
        BASE
        + """
    [verify]
    checks = ["contraction", "gradient_commutation"]

    [verify.contraction]
    n_pairs = 4
    n_steps = 40

    [verify.gradient_commutation]
    f = ["one", "cos1_x0"]
    x = [[0.5], [0.3]]
    t = [0.05, 0.05]
    """,
    )
    out = tmp_path / "out"
    assert cli.run(["verify", "--config", cfg, "--out", str(out)]) == 0
    summary = (out / "verify_summary.csv").read_text().splitlines()
    assert summary[0] == "check,pass,violations,exponent,r2,c_fit"
    assert summary[1].startswith("contraction,True,0")
    assert summary[2].startswith("gradient_commutation,True")
    manifest = read_manifest(out)
    assert manifest["check_contraction"] == "pass"
    assert manifest["check_gradient_commutation"] == "pass"
    assert (out / "check_contraction.csv").exists()
    assert (out / "check_gradient_commutation.csv").exists()


def test_green_subcommand_rows(tmp_path):
    cfg = write_config(
        tmp_path,
        BASE
        + """
    [green]
    n_quad = 16

    [[green.apply]]
    f = "cos1_x0"
    x = [0.25]

    [[green.riesz]]
    f = "cos1_x0"
    x = [0.5]
    """,
    )
    out = tmp_path / "out"
    assert cli.run(["green", "--config", cfg, "--out", str(out)]) == 0
    rows = (out / "green.csv").read_text().splitlines()
    assert rows[0] == "op,domain,x0,value,stderr,trunc_bound,q,ratio"
    ops = [r.split(",")[0] for r in rows[1:]]
    assert ops == ["apply:cos1_x0", "riesz_axis0:cos1_x0"]
    manifest = read_manifest(out)
    # box lambda1 is filled in analytically
    assert float(manifest["green_lambda1"]) == pytest.approx(3.14159265**2, rel=1e-6)
    assert "green_t_max" in manifest
