"""Detect, classify and characterize TLS-intercepting proxies.

A client captures the certificate chain it is actually served, a report
service compares it against the chain the genuine server presents, and
substitutes are classified by the issuer they claim.
"""

__version__ = "0.1.0"
