from .authoritative import AuthoritativeCache, AuthoritativeEntry, probe_fetcher
from .geo import UNKNOWN_COUNTRY, GeoDatabase, MaxMindGeo, load_geo
from .http import ReportServer
from .service import RecordFilter, ReplayReport, ReportService
from .store import MeasurementRecord, RecordStore, chain_id


def geolocate(ip: str, geo_db) -> str:
    return geo_db.lookup(ip)


__all__ = [
    "AuthoritativeCache",
    "AuthoritativeEntry",
    "GeoDatabase",
    "MaxMindGeo",
    "MeasurementRecord",
    "RecordFilter",
    "RecordStore",
    "ReplayReport",
    "ReportServer",
    "ReportService",
    "UNKNOWN_COUNTRY",
    "chain_id",
    "geolocate",
    "load_geo",
    "probe_fetcher",
]
