"""appnet: a per-host application network.

Each host runs one node. Applications added to a node get network-independent
identities (virtual IPs, names, tags); nodes replicate a service table over a
gossip channel and answer applications' network control-plane calls through a
virtual socket protocol, staying off the data path for established streams.
"""

__version__ = "0.1.0"

from appnet.errors import AppNetError

__all__ = ["AppNetError", "__version__"]
