fn main() {
    // CLI wired up in cli.rs; placeholder until the harness lands.
}
