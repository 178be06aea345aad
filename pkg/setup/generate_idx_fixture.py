"""
Write a small synthetic IDX dataset laid out like MNIST.

Blob classes are rendered as 8x8 byte images and saved under the four MNIST
file names, so pointing CLTESTBED_MNIST_DIR at the output directory exercises
the split-MNIST path end to end without downloading anything.
"""

import os

import pandas as pd
from dotenv import load_dotenv

from cltestbed.data import desk_blob_spec, make_blob_stream, render_blob_images, write_idx
from cltestbed.settings import MNIST_FILES

load_dotenv()


def generate_stream(train_per_class=60, test_per_class=20, seed=11):
    """Ten blob classes in 16 dimensions, split into five two-class tasks"""
    spec = desk_blob_spec(train_per_class=train_per_class, test_per_class=test_per_class, seed=seed)
    return make_blob_stream(spec, num_tasks=5, classes_per_task=2)


def save_to_files(stream, data_path):
    """Save train and test splits as IDX image/label pairs"""
    os.makedirs(data_path, exist_ok=True)
    splits = {"train": stream.train_set, "test": stream.test_set}
    for split, samples in splits.items():
        write_idx(os.path.join(data_path, MNIST_FILES[f"{split}_images"]), render_blob_images(samples))
        write_idx(os.path.join(data_path, MNIST_FILES[f"{split}_labels"]), samples.labels)
    print(f"✅ IDX fixture files created in {data_path}")
    return splits


if __name__ == "__main__":
    print("🔄 Generating IDX fixture...")

    data_path = os.getenv("CLTESTBED_FIXTURE_DIR", "setup/sample_data")
    splits = save_to_files(generate_stream(), data_path)

    counts = pd.DataFrame(
        {split: pd.Series(samples.labels).value_counts().sort_index() for split, samples in splits.items()}
    )
    print("\n📊 Samples per class:")
    print(counts.to_string())
    print(f"\nSet CLTESTBED_MNIST_DIR={data_path} to use it.")
