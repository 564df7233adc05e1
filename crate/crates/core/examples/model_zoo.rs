//! Checkpoints and the network registry: save, verify, reject corruption,
//! register by role and look networks up by task.

use amalgam::blocknet::{BlockNet, BlockNetSpec, HeadSpec};
use amalgam::zoo::{load_net, net_checkpoint, save_net, Checkpoint, Role, ZooRegistry};
use amalgam::Error;

fn main() -> amalgam::Result<()> {
    let dir = std::env::temp_dir().join(format!("amalgam-zoo-example-{}", std::process::id()));
    let zoo = ZooRegistry::open(&dir)?;
    for (id, task, seed) in [("red-a", "is_red", 1), ("red-b", "is_red", 2), ("bg-a", "bright_background", 3)] {
        let net = BlockNet::new(BlockNetSpec::default().with_heads(vec![HeadSpec::new(task, 2)]), seed)?;
        let entry = zoo.add_net(id, &net, Role::Source)?;
        println!("registered {} -> {}", entry.net_id, entry.path.display());
    }
    let reds: Vec<String> = zoo.list_by_task("is_red")?.into_iter().map(|e| e.net_id).collect();
    println!("sources for is_red: {reds:?}");

    let net = zoo.load("red-a")?;
    let path = dir.join("copy.amlg");
    save_net(&net, &path)?;
    println!("round trip is bitwise: {}", load_net(&path)?.params().bitwise_eq(net.params()));

    let mut bytes = net_checkpoint(&net).to_bytes()?;
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x10;
    match Checkpoint::from_bytes(&bytes) {
        Err(e @ Error::Corruption(_)) => println!("flipped bit rejected: {e}"),
        other => println!("unexpected: {other:?}"),
    }
    match zoo.add_net("red-a", &net, Role::Source) {
        Err(e) => println!("duplicate id rejected: {e}"),
        Ok(_) => println!("unexpected: duplicate accepted"),
    }
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}
