import pytest

from woc.harness import collect_trace
from woc.node import WOC
from woc.protocol import ObjectClass, ObjectManager
from woc.simnet import Cluster, LinkModel, ScriptedClient, make_profile, pinned_class


def scripted_cluster(scripts: dict, protocol: str = WOC, n: int = 5, ratio: float = 1.1, seed="s",
                     profile: str = "heterogeneous", batch_size: int = 1, prior=None, **cluster_kw):
    prof = make_profile(profile, n)
    links = LinkModel(prof)
    om = ObjectManager(range(n), ratio_for_class=lambda c: ratio, node_ratio=ratio,
                       prior_latency=prior or links.prior_latency(), pinned=pinned_class)
    cluster = Cluster(n, prof, protocol, om, seed, batch_size=batch_size, **cluster_kw)
    for cid, script in scripts.items():
        cluster.add_client(ScriptedClient(cid, cluster, script))
    return cluster


@pytest.fixture
def run_script():
    def run(scripts, t=1, **kw):
        cluster = scripted_cluster(scripts, **kw)
        cluster.run()
        return cluster, collect_trace(cluster, t)
    return run


__all__ = ["scripted_cluster", "ObjectClass"]
