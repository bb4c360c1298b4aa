import sys
import os

sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)), ".."))

from flsim.outputs import collect_metrics  # noqa: E402


def collect_to_csv(compare_dir):
    """
    Combines the per-scheme metrics.csv files of a compare run into one CSV.

    Args:
        compare_dir (str): The output directory of a compare run.

    Returns:
        str: Path of the combined CSV, or None on failure.
    """
    try:
        combined = collect_metrics(compare_dir)
        schemes = sorted(combined["scheme"].unique())
        print(f"Found {len(combined)} evaluated round(s) across {len(schemes)} scheme(s): {schemes}")

        # Write next to the scheme directories
        csv_file_path = os.path.join(compare_dir, "all_metrics.csv")
        combined.to_csv(csv_file_path, index=False)
        print(f"Combined metrics saved to: {csv_file_path}")
        return csv_file_path

    except FileNotFoundError:
        print(f"Error: Directory not found at path '{compare_dir}'. Please check the path and try again.")
    except Exception as e:
        print(f"An unexpected error occurred: {e}")
    return None


if __name__ == "__main__":
    # Check if a directory is provided
    if len(sys.argv) != 2:
        print("Usage: python3 utils/collect_metrics.py <compare_output_dir>")
        sys.exit(1)
    collect_to_csv(sys.argv[1])
