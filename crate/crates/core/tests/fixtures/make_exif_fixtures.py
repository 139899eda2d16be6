#!/usr/bin/env python3
"""Writes gps_le.jpg / gps_be.jpg: an 8x8 JPEG geotagged 28°4'48"N 96°59'24"W.

Both files encode the same coordinate, one with an "II" TIFF header and one
with "MM". Also writes no_gps.jpg (Exif present, GPS IFD absent).
"""
import io
import struct
import sys
from pathlib import Path

from PIL import Image


def tiff_block(order, with_gps=True):
    e = "<" if order == "II" else ">"
    out = bytearray(order.encode())
    out += struct.pack(e + "HI", 42, 8)
    if not with_gps:
        # IFD0 with a single Orientation tag
        out += struct.pack(e + "H", 1)
        out += struct.pack(e + "HHIHH", 0x0112, 3, 1, 1, 0)
        out += struct.pack(e + "I", 0)
        return bytes(out)
    gps_ifd = 8 + 2 + 12 + 4
    out += struct.pack(e + "H", 1)
    out += struct.pack(e + "HHII", 0x8825, 4, 1, gps_ifd)
    out += struct.pack(e + "I", 0)
    data_start = gps_ifd + 2 + 4 * 12 + 4
    lat = [(28, 1), (4, 1), (480, 10)]
    lon = [(96, 1), (59, 1), (24, 1)]
    out += struct.pack(e + "H", 4)
    out += struct.pack(e + "HHI", 0x0001, 2, 2) + b"N\0\0\0"
    out += struct.pack(e + "HHII", 0x0002, 5, 3, data_start)
    out += struct.pack(e + "HHI", 0x0003, 2, 2) + b"W\0\0\0"
    out += struct.pack(e + "HHII", 0x0004, 5, 3, data_start + 24)
    out += struct.pack(e + "I", 0)
    for n, d in lat + lon:
        out += struct.pack(e + "II", n, d)
    return bytes(out)


def geotagged_jpeg(tiff):
    buf = io.BytesIO()
    Image.new("RGB", (8, 8), (120, 90, 60)).save(buf, format="JPEG")
    jpeg = buf.getvalue()
    assert jpeg[:2] == b"\xff\xd8"
    payload = b"Exif\0\0" + tiff
    app1 = b"\xff\xe1" + struct.pack(">H", len(payload) + 2) + payload
    return jpeg[:2] + app1 + jpeg[2:]


def main(out_dir):
    out = Path(out_dir)
    (out / "gps_le.jpg").write_bytes(geotagged_jpeg(tiff_block("II")))
    (out / "gps_be.jpg").write_bytes(geotagged_jpeg(tiff_block("MM")))
    (out / "no_gps.jpg").write_bytes(geotagged_jpeg(tiff_block("II", with_gps=False)))


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else Path(__file__).parent)
