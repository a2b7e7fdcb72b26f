import json
import warnings
from pathlib import Path

import numpy as np
import pytest

from mfsocial.model import TopologyWarning, load_spec, spec_from_dict

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def scalar_cluster(count=1, A=0.0, B=1.0, G=0.0, Sigma=0.0, Gamma=0.0, Q=1.0, R=1.0, H=0.0,
                   mean=1.0, cov=0.0, label=None):
    return dict(label=label or "c", count=count, A=[[A]], B=[[B]], G=[[G]], Sigma=[[Sigma]],
                Gamma=[[Gamma]], Q=[[Q]], R=[[R]], H=[[H]], init_mean=[mean], init_cov=[[cov]])


def make_config(clusters, E=None, M=None, horizon=1.0, steps=100, n=1, m=1, d_w=1):
    K = len(clusters)
    return dict(horizon=horizon, steps=steps, state_dim=n, control_dim=m, noise_dim=d_w,
                clusters=clusters,
                topology=dict(E=E if E is not None else np.eye(K, dtype=int).tolist(),
                              M=M if M is not None else np.eye(K).tolist()))


def build(cfg):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", TopologyWarning)
        return spec_from_dict(cfg)


def config_spec(name, **changes):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", TopologyWarning)
        spec = load_spec((CONFIGS / name).read_text())
    return spec.replace(**changes) if changes else spec


def two_cluster_cfg(counts=(2, 3), steps=100, E=((1, 0), (1, 1)), sigma=(0.5, 0.4),
                    cov=(0.2, 0.3), G=(0.8, -0.6), Gamma=(0.6, 0.9), mean=(1.0, -0.5)):
    c0 = scalar_cluster(counts[0], A=0.2, G=G[0], Gamma=Gamma[0], Sigma=sigma[0], H=0.5,
                        mean=mean[0], cov=cov[0], label="a")
    c1 = scalar_cluster(counts[1], A=-0.3, G=G[1], Gamma=Gamma[1], Sigma=sigma[1], Q=2.0,
                        R=0.5, H=1.0, mean=mean[1], cov=cov[1], label="b")
    return make_config([c0, c1], E=[list(r) for r in E], M=[[0.5, 1.5], [1.2, 0.7]],
                       steps=steps)


@pytest.fixture
def tanh_spec():
    return build(make_config([scalar_cluster(1)], steps=1000))


@pytest.fixture
def two_spec():
    return build(two_cluster_cfg())
