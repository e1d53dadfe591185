"""
A short tour of the perceptual hashes
=====================================

Hash a synthetic photo and a synthetic line drawing, then see how far the
hashes drift under resizing and JPEG re-encoding compared with an unrelated
picture.

Run with ``python demos/hashing_tour.py``.
"""

import io

from PIL import Image

from risbench.fixtures import encode, synthetic_image
from risbench.hashcore import DistanceThreshold, ahash, decode_image, dhash, distance, is_same, phash, vishash

# two reference pictures: smooth colour fields, and black lines on white
photo = synthetic_image(1, 640, 480, "natural")
drawing = synthetic_image(2, 640, 480, "abstract")

# bytes are what the pipeline actually sees, so decode from encoded files
query = decode_image(encode(photo))
print("pHash of the photo:", phash(query).hex())
print("aHash and dHash:", ahash(query).hex(), dhash(query).hex())


def variants(img):
    """The usual ways an engine's thumbnail drifts from the uploaded image."""
    yield "same bytes", encode(img)
    yield "320px wide", encode(img.resize((320, 240), Image.Resampling.LANCZOS))
    yield "128px wide", encode(img.resize((128, 96), Image.Resampling.LANCZOS))
    buf = io.BytesIO()
    img.convert("RGB").save(buf, "JPEG", quality=60)
    yield "JPEG q60", buf.getvalue()


t = DistanceThreshold()
for name, img in (("photo", photo), ("drawing", drawing)):
    ref = decode_image(encode(img))
    print(f"\n{name}:")
    for label, data in variants(img):
        cand = decode_image(data)
        dp = distance(phash(ref), phash(cand))
        dv = distance(vishash(ref), vishash(cand))
        print(f"  {label:<11} pHash {dp:2d} bits   VisHash {dv:.4f}   same? {is_same(phash(ref), phash(cand), t)}")

# an unrelated image should land far outside both thresholds
other = decode_image(encode(synthetic_image(99, 640, 480, "natural")))
print("\nunrelated photo: pHash", distance(phash(query), phash(other)), "bits,",
      "VisHash", round(distance(vishash(query), vishash(other)), 4))
