"""Regenerate the test fixtures in this directory.

Requires numpy, Pillow, opencv-python-headless, qrcode and lameenc.
Outputs are deterministic; rerunning rewrites identical files.
"""

import hashlib
import json
import struct
import wave
from pathlib import Path

import cv2
import lameenc
import numpy as np
import qrcode
from PIL import Image, ImageDraw

HERE = Path(__file__).resolve().parent


def parts_hash(*parts: bytes) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(struct.pack("<Q", len(p)))
        h.update(p)
    return h.hexdigest()


def fruit_bowl() -> str:
    img = Image.new("RGB", (512, 512), (124, 86, 52))
    d = ImageDraw.Draw(img)
    d.rectangle([0, 0, 511, 200], fill=(214, 204, 186))
    d.ellipse([86, 250, 426, 470], fill=(236, 236, 230), outline=(90, 90, 90), width=4)
    fruits = [
        ((150, 260, 250, 360), (232, 128, 24)),
        ((230, 230, 330, 330), (196, 30, 38)),
        ((300, 262, 396, 358), (120, 170, 40)),
        ((190, 320, 280, 410), (240, 200, 40)),
        ((270, 320, 360, 410), (112, 44, 120)),
    ]
    for box, color in fruits:
        d.ellipse(box, fill=color, outline=(40, 30, 20), width=2)
    path = HERE / "fruit_bowl.png"
    img.save(path, optimize=False)
    rgb = np.asarray(Image.open(path).convert("RGB"), dtype=np.uint8)
    return parts_hash(struct.pack("<I", 512), struct.pack("<I", 512), rgb.tobytes())


def song() -> None:
    # six ten-second sections with different timbre
    rate = 8000
    t = np.arange(rate * 10) / rate
    rng = np.random.default_rng(7)
    sections = [
        0.3 * np.sin(2 * np.pi * 110 * t),
        0.5 * np.sin(2 * np.pi * 440 * t) * (0.5 + 0.5 * np.sin(2 * np.pi * 2 * t)),
        0.2 * rng.standard_normal(t.size),
        0.6 * np.sign(np.sin(2 * np.pi * 220 * t)),
        0.05 * np.sin(2 * np.pi * 880 * t),
        0.4 * np.sin(2 * np.pi * 330 * t) + 0.2 * np.sin(2 * np.pi * 1320 * t),
    ]
    signal = np.clip(np.concatenate(sections), -1, 1)
    pcm = (signal * 32767).astype("<i2")
    with wave.open(str(HERE / "song_60s.wav"), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(rate)
        w.writeframes(pcm.tobytes())


def short_mp3() -> None:
    rate = 44100
    t = np.arange(rate * 3) / rate
    pcm = (0.4 * np.sin(2 * np.pi * 440 * t) * 32767).astype("<i2")
    enc = lameenc.Encoder()
    enc.set_bit_rate(64)
    enc.set_in_sample_rate(rate)
    enc.set_channels(1)
    enc.set_quality(2)
    data = enc.encode(pcm.tobytes()) + enc.flush()
    (HERE / "tone_3s.mp3").write_bytes(data)


def qr_over_pattern() -> None:
    payload = "https://example.com/coverforge"
    code = qrcode.QRCode(error_correction=qrcode.constants.ERROR_CORRECT_H, border=4, box_size=1)
    code.add_data(payload)
    code.make(fit=True)
    modules = np.array(code.get_matrix(), dtype=bool)
    n = modules.shape[0]
    px = 512 // n
    qr = np.kron(~modules, np.ones((px, px), dtype=bool)).astype(np.float64) * 255
    pad = 512 - qr.shape[0]
    qr = np.pad(qr, ((pad // 2, pad - pad // 2), (pad // 2, pad - pad // 2)), constant_values=255)
    yy, xx = np.mgrid[0:512, 0:512]
    base = np.where(((xx // 3) + (yy // 3)) % 2 == 0, 30.0, 225.0)
    base = np.stack([base, 255 - base, np.full_like(base, 128.0)], axis=-1)
    blended = 0.7 * base + 0.3 * qr[..., None]
    img = np.clip(np.rint(blended), 0, 255).astype(np.uint8)
    Image.fromarray(img, "RGB").save(HERE / "qr_opacity30.png")

    # same fixed variants the scanner documents: gray, 2-98 percentile
    # stretch, half size, stretch then half size
    gray = np.rint(img.astype(np.float64) @ [0.299, 0.587, 0.114]).astype(np.uint8)
    lo, hi = np.percentile(gray, 2), np.percentile(gray, 98)
    boosted = np.clip(np.rint((gray - lo) / (hi - lo) * 255), 0, 255).astype(np.uint8)

    def half(a):
        return cv2.resize(a, (a.shape[1] // 2, a.shape[0] // 2), interpolation=cv2.INTER_AREA)

    detector = cv2.QRCodeDetector()
    decoded = [detector.detectAndDecode(v)[0] for v in (gray, boosted, half(gray), half(boosted))]
    verdict = {
        "payload": payload,
        "opacity": 0.3,
        "decodes": payload in decoded,
        "oracle": "opencv QRCodeDetector over the four scan variants",
    }
    (HERE / "qr_opacity30.json").write_text(json.dumps(verdict, indent=2) + "\n")


if __name__ == "__main__":
    print("fruit_bowl content hash:", fruit_bowl())
    song()
    short_mp3()
    qr_over_pattern()
    print(json.loads((HERE / "qr_opacity30.json").read_text()))
