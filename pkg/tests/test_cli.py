import os
import socket
import threading

import pytest

from flmm.cli import main

CONFIG = """
[run]
seed = 7
rounds = 2
epochs = 2
lr = 0.1
batch_size = 16
deadline = 60

[model]

[party:p0]
size = 40
seed = 7
classes = 0,1,2,3
anchor_mu = 2.0

[party:p1]
size = 40
seed = 8
classes = 0,1,2,3
anchor_mu = 2.0

[eval]
size = 40
seed = 106
classes = 0,1,2,3
"""


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "scenario.ini"
    path.write_text(CONFIG)
    return str(path)


def test_gendata(config_file, tmp_path, capsys):
    out = str(tmp_path / "data")
    assert main(["gendata", "--spec", config_file, "--out", out]) == 0
    for name in ("p0.corpus", "p1.corpus", "eval.corpus"):
        assert os.path.exists(os.path.join(out, name))
    assert "wrote 40 records" in capsys.readouterr().out


def test_gendata_missing_config(tmp_path, capsys):
    code = main(["gendata", "--spec", str(tmp_path / "nope.ini"),
                 "--out", str(tmp_path / "d")])
    assert code == 2
    assert "config error" in capsys.readouterr().err


def test_simulate(config_file, tmp_path, capsys):
    out = str(tmp_path / "run")
    assert main(["simulate", "--config", config_file, "--out", out]) == 0
    assert os.path.exists(os.path.join(out, "final.ckpt"))
    assert os.path.exists(os.path.join(out, "eval.txt"))
    assert "recall_at_1=" in capsys.readouterr().out


def test_simulate_shapley(config_file, tmp_path, capsys):
    out = str(tmp_path / "run")
    code = main(["simulate", "--config", config_file, "--out", out, "--shapley"])
    assert code == 0
    text = capsys.readouterr().out
    assert "shapley p0=" in text and "shapley p1=" in text


def test_eval_and_clean(config_file, tmp_path, capsys):
    data = str(tmp_path / "data")
    run = str(tmp_path / "run")
    main(["gendata", "--spec", config_file, "--out", data])
    main(["simulate", "--config", config_file, "--out", run])
    capsys.readouterr()

    ckpt = os.path.join(run, "final.ckpt")
    corpus = os.path.join(data, "eval.corpus")
    assert main(["eval", "--model", ckpt, "--corpus", corpus]) == 0
    assert "mean_bleu=" in capsys.readouterr().out

    kept_path = str(tmp_path / "kept.corpus")
    assert main(["clean", "--model", ckpt, "--corpus", corpus,
                 "--threshold", "-1.0", "--out", kept_path]) == 0
    text = capsys.readouterr().out
    assert "kept=" in text and os.path.exists(kept_path)


def test_shapley_from_log(config_file, tmp_path, capsys):
    data = str(tmp_path / "data")
    run = str(tmp_path / "run")
    main(["gendata", "--spec", config_file, "--out", data])
    main(["simulate", "--config", config_file, "--out", run])
    capsys.readouterr()
    code = main(["shapley", "--log", os.path.join(run, "log"),
                 "--eval", os.path.join(data, "eval.corpus")])
    assert code == 0
    text = capsys.readouterr().out
    assert "method=exact" in text and "value p0=" in text

    code = main(["shapley", "--log", os.path.join(run, "log"),
                 "--eval", os.path.join(data, "eval.corpus"),
                 "--method", "wtdp", "--budget", "20",
                 "--weights", "p0=2.0"])
    assert code == 0
    assert "method=wtdp" in capsys.readouterr().out


def test_server_client_loopback(config_file, tmp_path, capsys):
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    log_dir = str(tmp_path / "log")
    server = threading.Thread(
        target=main,
        args=(["server", "start", "--config", config_file,
               "--port", str(port), "--log-dir", log_dir],),
        daemon=True)
    server.start()
    clients = []
    for pid in ("p0", "p1"):
        t = threading.Thread(
            target=main,
            args=(["client", "run", "--config", config_file,
                   "--endpoint", f"127.0.0.1:{port}", "--party", pid],),
            daemon=True)
        t.start()
        clients.append(t)
    for t in clients:
        t.join(timeout=120)
        assert not t.is_alive()
    server.join(timeout=120)
    assert not server.is_alive()
    assert os.path.exists(os.path.join(log_dir, "rounds.log"))


def test_client_bad_endpoint(config_file, capsys, monkeypatch):
    import flmm.client
    monkeypatch.setattr(flmm.client.time, "sleep", lambda _t: None)
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    code = main(["client", "run", "--config", config_file,
                 "--endpoint", f"127.0.0.1:{port}", "--party", "p0"])
    assert code == 3
    assert "transport error" in capsys.readouterr().err


def test_bench(capsys):
    assert main(["bench", "--n", "10000"]) == 0
    assert "numpy:" in capsys.readouterr().out


def test_unknown_subcommand_exits_2():
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2
