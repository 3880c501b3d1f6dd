"""Packet-level simulator and protocol core for a receiver-driven datacenter transport."""

from .fabric import Fabric, Packet, PacketKind, Topology, WireModel
from .priority_alloc import PriorityAllocation, SizeDistribution, allocate, unsched_priority_for
from .protocol import HomaTransport, TransportConfig
from .sim_core import Simulator

__all__ = [
    "Fabric", "HomaTransport", "Packet", "PacketKind", "PriorityAllocation", "Simulator",
    "SizeDistribution", "Topology", "TransportConfig", "WireModel", "allocate",
    "unsched_priority_for",
]
__version__ = "0.1.0"
