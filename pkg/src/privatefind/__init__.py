"""Privacy-preserving Bluetooth finder ecosystem.

Four roles — finder device, owner phone, reporter phone, server — exchange
end-to-end encrypted location reports over a deterministic simulated radio
link and network bus. The server stores ciphertext and rotating pseudonyms
only; reporters stay anonymous by construction.
"""

from .crypto import AuthFailure, SealedBox, open_box, ratchet_first, ratchet_next, seal
from .owner import Owner, OwnerRecord, VerifiedReport, export_identity, import_identity
from .reporter import Reporter
from .server import ManufacturerRegistry, PrivateFindServer
from .transport import Envelope, LinkAddress, SimNetwork, Transcript
from .wire import GeoLocation, LocationReport

__version__ = "0.1.0"

__all__ = [
    "AuthFailure",
    "Envelope",
    "GeoLocation",
    "LinkAddress",
    "LocationReport",
    "ManufacturerRegistry",
    "Owner",
    "OwnerRecord",
    "PrivateFindServer",
    "Reporter",
    "SealedBox",
    "SimNetwork",
    "Transcript",
    "VerifiedReport",
    "export_identity",
    "import_identity",
    "open_box",
    "ratchet_first",
    "ratchet_next",
    "seal",
    "__version__",
]
