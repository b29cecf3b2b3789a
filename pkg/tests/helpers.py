"""Shared test helpers."""
from lmcyclegan.training import TrainConfig


def tiny_config(data_root, **kw) -> TrainConfig:
    """Smallest shapes the architecture allows; seconds per hundred steps."""
    base = dict(size=32, ngf=4, ndf=8, ndf_local=4, n_res=1, iters_regressor=4, iters_stage1=6,
                iters_stage2=6, checkpoint_interval=3, data_root=str(data_root))
    base.update(kw)
    return TrainConfig(**base)
