//! Run code and commands in the local sandbox backend.

use std::time::Duration;

use agentry::config::EnvSpec;
use agentry::environment::{create_env, default_interpreter};

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    let env = create_env(&EnvSpec::named("sandbox"))?;
    println!("session {} in {:?}", env.session_id(), env.scratch_dir());

    let out = env.exec_command("echo hello from the sandbox", Duration::from_secs(5)).await?;
    print!("{}", out.render());

    if default_interpreter().is_some() {
        let out = env.exec_code("print(sum(range(10)))", Duration::from_secs(10)).await?;
        print!("{}", out.render());
        let slow = env.exec_code("import time\ntime.sleep(5)", Duration::from_millis(300)).await?;
        println!("timed out: {}", slow.timed_out());
    }
    env.close();
    Ok(())
}
