from ganssl.config import load_config


def tiny_config(tmp_path, model="badgan", *extra):
    """A seconds-long synthetic run."""
    return load_config(overrides=[
        f"experiment.model={model}", "experiment.dataset=synthetic-moons", f"experiment.output_dir={tmp_path}",
        "data.labeled_count=8", "data.synthetic_n_per_class=104", "data.synthetic_test_per_class=50",
        "train.epochs=2", "train.batch_size=50", "train.eval_interval=1", "train.z_dim=8",
        "model.toy_hidden=16,16", "density.kind=kde-pixel", "density.max_reference=100",
        *extra,
    ])
