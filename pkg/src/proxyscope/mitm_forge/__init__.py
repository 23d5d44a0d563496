from .forge import (
    CertificateAuthority,
    ForgedChain,
    ForgeProfile,
    IssuerMode,
    SubjectMode,
    forge_certificate,
    generate_ca,
)
from .proxy import InterceptingProxy, UpstreamUnavailable, run_intercepting_proxy

__all__ = [
    "CertificateAuthority",
    "ForgedChain",
    "ForgeProfile",
    "InterceptingProxy",
    "IssuerMode",
    "SubjectMode",
    "UpstreamUnavailable",
    "forge_certificate",
    "generate_ca",
    "run_intercepting_proxy",
]
