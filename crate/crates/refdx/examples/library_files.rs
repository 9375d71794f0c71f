//! Manifests in, binary libraries out, and back again.

use refdx_core::format::{load_library, save_library};
use refdx_core::manifest::{library_from_records, read_manifest, snapshot_to_records, write_manifest, ManifestRecord};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let manifest = dir.path().join("reference.jsonl");
    std::fs::write(
        &manifest,
        concat!(
            "{\"id\": 1, \"label\": \"normal\", \"source\": \"atlas\", \"vector\": [3, 4, 0]}\n",
            "{\"id\": 2, \"label\": \"glaucoma\", \"source\": \"atlas\", \"vector\": [0, 1, 1]}\n",
            "\n",
            "{\"id\": 3, \"label\": \"normal\", \"source\": \"atlas\", \"vector\": [1, 0, 0], \"ref\": \"atlas/3.png\"}\n",
        ),
    )?;
    let records = read_manifest(&manifest)?;
    let library = library_from_records(&records, None)?;
    println!("classes {:?}, first vector {:?}", library.catalog().names(), library.items()[0].embedding.values());

    let path = dir.path().join("reference.grdl");
    save_library(&library, &path)?;
    println!("{} bytes on disk", std::fs::metadata(&path)?.len());
    let loaded = load_library(&path)?;
    assert_eq!(loaded, library);

    let back: Vec<ManifestRecord> = snapshot_to_records(&loaded);
    write_manifest(&back, dir.path().join("export.jsonl"))?;
    print!("{}", std::fs::read_to_string(dir.path().join("export.jsonl"))?);

    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, "{\"label\": \"normal\", \"vector\": [0, 0, 0]}\n")?;
    println!("zero vector: {}", library_from_records(&read_manifest(&bad)?, None).unwrap_err());
    Ok(())
}
