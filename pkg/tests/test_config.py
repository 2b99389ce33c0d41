import pytest

from tokenmark.bench.config import ConfigError, RunConfig, default_data_dir, load_config, parse_config


def test_parse_and_round_trip():
    cfg = parse_config("k = 32  # bits\nbeta=2.5\n\nprompt = a [red circle W*]\n")
    assert cfg.k == 32 and cfg.beta == 2.5 and cfg.prompt == "a [red circle W*]"
    assert parse_config(cfg.to_text()) == cfg


def test_unknown_key_and_bad_values():
    with pytest.raises(ConfigError, match="unknown"):
        parse_config("kk = 3")
    with pytest.raises(ConfigError, match="expects"):
        parse_config("k = many")
    with pytest.raises(ConfigError):
        parse_config("just words")
    with pytest.raises(ConfigError):
        parse_config("experiment = table9")
    with pytest.raises(ConfigError):
        RunConfig().replace(nope=1)


def test_digest_tracks_only_listed_keys():
    a = RunConfig()
    b = a.replace(tau=4)
    assert a.digest(["k", "seed"]) == b.digest(["k", "seed"])
    assert a.digest(["tau"]) != b.digest(["tau"])
    assert a.digest() != b.digest()


def test_lists():
    cfg = RunConfig(taus="2, 4,8", attacks="blur:1, jpeg:80")
    assert cfg.int_list("taus") == [2, 4, 8]
    assert cfg.attack_list() == ["blur:1", "jpeg:80"]


def test_data_dir(monkeypatch, tmp_path):
    monkeypatch.setenv("TOKENMARK_DATA", str(tmp_path))
    assert default_data_dir() == tmp_path
    assert RunConfig().resolved_data_dir() == tmp_path
    assert RunConfig(data_dir="/x").resolved_data_dir().as_posix() == "/x"


def test_load_missing(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "none.cfg")
    p = tmp_path / "a.cfg"
    p.write_text("seed = 7\n")
    assert load_config(p).seed == 7
