import io
import logging
from pathlib import Path

import matplotlib.image as mpimg
import numpy as np

from aggronet.models import Dataset, DatasetError, Image, ImageDecodeError, LabeledImage

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".ppm", ".png")
_WHITESPACE = b" \t\n\r\x0b\x0c"


def _ppm_header(data: bytes) -> tuple[list[bytes], int]:
    """Split the four header tokens (magic, width, height, maxval) from the payload offset."""
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        if pos >= len(data):
            raise ImageDecodeError("PPM header is truncated")
        byte = data[pos : pos + 1]
        if byte in _WHITESPACE:
            pos += 1
        elif byte == b"#":
            end = data.find(b"\n", pos)
            pos = len(data) if end < 0 else end + 1
        else:
            start = pos
            while pos < len(data) and data[pos : pos + 1] not in _WHITESPACE:
                pos += 1
            tokens.append(data[start:pos])
            if len(tokens) == 1 and tokens[0] != b"P6":
                raise ImageDecodeError(
                    f"Unsupported image format: magic {tokens[0][:2]!r}, expected b'P6'"
                )
    # exactly one whitespace byte separates maxval from the pixel payload
    if pos >= len(data):
        raise ImageDecodeError("PPM header is truncated")
    return tokens, pos + 1


def decode_ppm(data: bytes) -> Image:
    """
    Decode a binary PPM (``P6``, maxval 255) into an 8-bit RGB image.

    Args:
        data (bytes): The file contents.

    Returns:
        Image: The decoded image; pixels are recovered exactly.

    Raises:
        ImageDecodeError: On a wrong magic number, a maxval other than 255, a malformed
            header, or a pixel payload shorter than width * height * 3 bytes.
    """
    tokens, offset = _ppm_header(data)
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as e:
        raise ImageDecodeError(f"Malformed PPM header: {tokens}") from e
    if width < 1 or height < 1:
        raise ImageDecodeError(f"PPM dimensions must be positive, got {width}x{height}")
    if maxval != 255:
        raise ImageDecodeError(f"Only maxval 255 is supported, got {maxval}")
    expected = width * height * 3
    payload = data[offset : offset + expected]
    if len(payload) < expected:
        raise ImageDecodeError(
            f"PPM payload is truncated: expected {expected} bytes for {width}x{height}, "
            f"got {len(payload)}"
        )
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3).copy()
    return Image(width=width, height=height, pixels=pixels)


def encode_ppm(image: Image) -> bytes:
    header = f"P6\n{image.width} {image.height}\n255\n".encode("ascii")
    return header + np.ascontiguousarray(image.pixels, dtype=np.uint8).tobytes()


def decode_png(data: bytes) -> Image:
    try:
        array = mpimg.imread(io.BytesIO(data), format="png")
    except Exception as e:
        raise ImageDecodeError(f"Could not decode PNG: {e}") from e
    if array.ndim == 2:
        array = np.stack([array] * 3, axis=-1)
    array = array[:, :, :3]
    if array.dtype != np.uint8:
        array = np.round(np.clip(array, 0.0, 1.0) * 255.0).astype(np.uint8)
    height, width = array.shape[:2]
    return Image(width=width, height=height, pixels=np.ascontiguousarray(array))


def decode_image(data: bytes, suffix: str = ".ppm") -> Image:
    """Decode image bytes by file suffix; PPM is the reference format, PNG is optional."""
    suffix = suffix.lower()
    if suffix == ".ppm":
        return decode_ppm(data)
    if suffix == ".png":
        return decode_png(data)
    raise ImageDecodeError(f"Unsupported image file type: {suffix}")


def read_image(path: str | Path) -> Image:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise ImageDecodeError(f"Could not read image {path}: {e}") from e
    try:
        return decode_image(data, path.suffix)
    except ImageDecodeError as e:
        raise ImageDecodeError(f"{path}: {e}") from e


def _byte_order(path: Path) -> bytes:
    return path.name.encode("utf-8", "surrogateescape")


def load_dataset(root_dir: str | Path) -> Dataset:
    """
    Load a ``root/<class_name>/<image files>`` tree.

    Class names are the subdirectory names sorted by byte order, and files are read in sorted
    order, so the result is deterministic. Empty class directories and undecodable files are
    skipped with a warning.

    Args:
        root_dir (str | Path): Dataset root.

    Returns:
        Dataset: Decoded examples labelled by directory.

    Raises:
        DatasetError: If the root is missing or no class directory holds a usable image.
    """
    root = Path(root_dir)
    if not root.is_dir():
        raise DatasetError(f"Dataset root {root} is not a directory")

    class_names: list[str] = []
    examples: list[LabeledImage] = []
    for class_dir in sorted((p for p in root.iterdir() if p.is_dir()), key=_byte_order):
        files = sorted(
            (p for p in class_dir.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES),
            key=_byte_order,
        )
        decoded = []
        for file in files:
            try:
                decoded.append((file, read_image(file)))
            except ImageDecodeError as e:
                logger.warning("Skipping undecodable image: %s", e)
        if not decoded:
            logger.warning("Skipping class directory %s: no decodable images", class_dir)
            continue
        label = len(class_names)
        class_names.append(class_dir.name)
        examples.extend(LabeledImage(image, label, source=file) for file, image in decoded)

    if not class_names:
        raise DatasetError(f"No usable class directories under {root}")
    if len(class_names) == 1:
        logger.warning("Dataset at %s has a single class: %s", root, class_names[0])
    logger.info("Loaded %d images in %d classes from %s", len(examples), len(class_names), root)
    return Dataset(examples=examples, class_names=tuple(class_names))


def write_dataset(dataset: Dataset, root_dir: str | Path) -> list[Path]:
    """Write ``dataset`` as ``root/<class_name>/<class_name>_<index>.ppm``."""
    root = Path(root_dir)
    written = []
    per_class = [0] * len(dataset.class_names)
    for example in dataset.examples:
        name = dataset.class_names[example.label]
        class_dir = root / name
        class_dir.mkdir(parents=True, exist_ok=True)
        path = class_dir / f"{name}_{per_class[example.label]:05d}.ppm"
        per_class[example.label] += 1
        path.write_bytes(encode_ppm(example.image))
        written.append(path)
    return written
