"""Wire formats and the cross-organizational ingestion traces."""

from seaflow.ingestion.formats import (
    RawRecord,
    SourceFormat,
    UnparseablePayload,
    encode_payload,
    parse_json,
    parse_payload,
    parse_xml,
)

__all__ = [
    "RawRecord",
    "SourceFormat",
    "UnparseablePayload",
    "encode_payload",
    "parse_json",
    "parse_payload",
    "parse_xml",
]
