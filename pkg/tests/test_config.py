import pytest

from tracefuse.config import ConfigError, TrainConfig, load_config, parse_config


def test_default_hyperparameters():
    c = TrainConfig()
    assert c.learning_rate == 2e-4 and c.warmup_iters == 100
    assert c.batch_size == 4 and c.grad_accum_steps == 4
    assert (c.beta1, c.beta2, c.weight_decay) == (0.9, 0.999, 0.0)
    w = c.loss_weights
    assert (w.lambda_txt, w.lambda_mask, w.lambda_bce, w.lambda_dice) == (1.0, 1.0, 1.0, 0.2)


def test_parse_and_dump_roundtrip():
    text = """
    # comment line
    learning_rate = 1e-3   # trailing comment
    total_iters = 50
    warmup_iters = 5
    use_trace = false
    decoder = single
    """
    c = parse_config(text)
    assert (c.learning_rate, c.total_iters, c.warmup_iters, c.use_trace, c.decoder) == (1e-3, 50, 5, False, "single")
    assert parse_config(c.dumps()) == c


@pytest.mark.parametrize("text", ["bogus = 1", "total_iters = ten", "total_iters", "warmup_iters = 5000",
                                  "batch_size = 0", "decoder = other", "use_trace = maybe"])
def test_rejects_bad_configs(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_env_seed_override(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("seed = 3\n")
    assert load_config(p, env={}).seed == 3
    assert load_config(p, env={"FORGE_SEED": "17"}).seed == 17
    with pytest.raises(ConfigError):
        load_config(p, env={"FORGE_SEED": "x"})


def test_model_config_projection():
    m = TrainConfig(model_dim=32, num_heads=2).model_config()
    assert m.model_dim == 32 and m.num_heads == 2
